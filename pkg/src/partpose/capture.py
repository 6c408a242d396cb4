"""Ground-truth video simulator.

Scripts articulated motions that loop L times over the video while a
spiral camera orbits the object at a different period, renders clean
observations, then degrades them: random occluder rectangles (features
and mask zeroed), additive feature noise, and a per-frame affine
distortion of depth (a > 0), which preserves depth orderings exactly -
the only property the relative depth loss relies on.

Ground-truth poses are stored next to, but separate from, the
observations so the tracking pipeline can run blind. The frame-0 camera
pose is exposed as `init_obj_cam`: it models the known scan-time
alignment every tracker starts from.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .geom import Pose
from .render import Camera, FeatureImage, load_feature_image, render, save_feature_image
from .scene import ObjectTemplate, PoseConfig

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass
class DegradeConfig:
    max_occluders: int = 2
    occluder_min_frac: float = 0.05
    occluder_max_frac: float = 0.20
    feature_noise: float = 0.05
    depth_distort: bool = True

    @staticmethod
    def off() -> "DegradeConfig":
        return DegradeConfig(max_occluders=0, feature_noise=0.0, depth_distort=False)

    def to_json(self) -> dict:
        return {
            "max_occluders": self.max_occluders,
            "occluder_min_frac": self.occluder_min_frac,
            "occluder_max_frac": self.occluder_max_frac,
            "feature_noise": self.feature_noise,
            "depth_distort": self.depth_distort,
        }

    @staticmethod
    def from_json(d: dict) -> "DegradeConfig":
        return DegradeConfig(
            max_occluders=int(d["max_occluders"]),
            occluder_min_frac=float(d["occluder_min_frac"]),
            occluder_max_frac=float(d["occluder_max_frac"]),
            feature_noise=float(d["feature_noise"]),
            depth_distort=bool(d["depth_distort"]),
        )


@dataclass
class Observation:
    image: FeatureImage  # degraded features; depth kept for diagnostics only
    mask: np.ndarray  # (H, W) bool
    pseudo_depth: np.ndarray  # (H, W) monotone transform of true depth
    frame_index: int
    fully_occluded: bool = False


@dataclass
class Video:
    observations: list[Observation]
    gt_poses: list[PoseConfig]  # hidden from tracking, used by evaluation
    camera: Camera
    init_obj_cam: Pose  # known scan-time alignment (frame 0 camera)
    d_co: float
    motion_loops: int
    seed: int
    degrade: DegradeConfig

    @property
    def num_frames(self) -> int:
        return len(self.observations)


def look_at(eye: np.ndarray, target: np.ndarray | None = None) -> Pose:
    """Object-to-camera pose for a camera at `eye` looking at `target`.

    Camera convention: +z forward, +x right, +y down in the image.
    """
    if target is None:
        target = np.zeros(3)
    f = target - eye
    f = f / np.linalg.norm(f)
    r = np.cross(f, WORLD_UP)
    if np.linalg.norm(r) < 1e-9:
        r = np.cross(f, np.array([1.0, 0.0, 0.0]))
    r = r / np.linalg.norm(r)
    y = np.cross(f, r)
    cam2world = np.stack([r, y, f], axis=1)
    return Pose(cam2world.T, -cam2world.T @ eye)


def spiral_camera(
    t: float,
    d_co: float,
    turns: float = 2.0,
    elev_amp_deg: float = 30.0,
    elev_cycles: float = 1.5,
    azimuth0: float = 0.4,
) -> Pose:
    """Orbit at fixed radius with oscillating elevation."""
    az = 2.0 * math.pi * turns * t + azimuth0
    el = math.radians(elev_amp_deg) * math.sin(2.0 * math.pi * elev_cycles * t)
    eye = d_co * np.array(
        [math.cos(az) * math.cos(el), math.sin(az) * math.cos(el), math.sin(el)]
    )
    return look_at(eye)


def _rot_about(axis: np.ndarray, point: np.ndarray, angle: float) -> Pose:
    """Rigid rotation about a line (axis through point)."""
    from .geom import so3_exp

    R = so3_exp(axis / np.linalg.norm(axis) * angle)
    return Pose(R, point - R @ point)


@dataclass
class MotionScript:
    """Per-part pose and camera path as functions of t in [0, 1)."""

    part_fn: Callable[[float], list[Pose]]
    camera_fn: Callable[[float], Pose]
    loops: int
    d_co: float


def _phase(t: float, loops: int, hold_fraction: float) -> float:
    """Loop phase in [0, 1), optionally holding at the loop start."""
    ph = (t * loops) % 1.0
    if hold_fraction > 0.0:
        ph = 0.0 if ph < hold_fraction else (ph - hold_fraction) / (1.0 - hold_fraction)
    return ph


def make_script(
    template: ObjectTemplate,
    kind: str,
    loops: int = 3,
    amplitude_deg: float = 70.0,
    slide_amplitude: float = 0.35,
    d_co: float = 1.4,
    camera_turns: float = 2.0,
    elev_amp_deg: float = 30.0,
    elev_cycles: float = 1.5,
    hold_fraction: float = 0.0,
) -> MotionScript:
    """Build the scripted motion matching a procedural template kind."""
    amp = math.radians(amplitude_deg)
    rest = template.rest_config_parts()
    conns = {(c.part_a, c.part_b): c.centroid for c in template.connections}
    axis = np.array([0.0, 1.0, 0.0])

    if kind == "revolute2":
        hinge = conns[(0, 1)]

        def part_fn(t: float) -> list[Pose]:
            ph = _phase(t, loops, hold_fraction)
            ang = amp * math.sin(2.0 * math.pi * ph)
            return [rest[0].copy(), _rot_about(axis, hinge, ang).compose(rest[1])]

    elif kind == "revolute3":
        hinge01 = conns[(0, 1)]
        hinge12 = conns[(1, 2)]

        def part_fn(t: float) -> list[Pose]:
            ph = _phase(t, loops, hold_fraction)
            a1 = amp * math.sin(2.0 * math.pi * ph)
            a2 = -0.7 * amp * math.sin(2.0 * math.pi * ph)
            m1 = _rot_about(axis, hinge01, a1)
            # the far hinge rides on the middle part
            m2 = m1.compose(_rot_about(axis, hinge12, a2))
            return [rest[0].copy(), m1.compose(rest[1]), m2.compose(rest[2])]

    elif kind == "prismatic2":
        slide = np.array([1.0, 0.0, 0.0])

        def part_fn(t: float) -> list[Pose]:
            ph = _phase(t, loops, hold_fraction)
            s = slide_amplitude * (0.5 - 0.5 * math.cos(2.0 * math.pi * ph))
            moved = Pose(np.eye(3), slide * s)
            return [rest[0].copy(), moved.compose(rest[1])]

    elif kind == "multibody3":
        dir1 = np.array([0.6, 0.5, 0.3])
        dir2 = np.array([-0.2, -0.6, 0.5])

        def part_fn(t: float) -> list[Pose]:
            ph = _phase(t, loops, hold_fraction)
            s = 0.5 - 0.5 * math.cos(2.0 * math.pi * ph)
            spin = 0.6 * amp * math.sin(2.0 * math.pi * ph)
            m1 = Pose(np.eye(3), dir1 * (0.25 * s)).compose(
                _rot_about(axis, rest[1].t, spin)
            )
            m2 = Pose(np.eye(3), dir2 * (0.2 * s))
            return [rest[0].copy(), m1.compose(rest[1]), m2.compose(rest[2])]

    else:
        raise ValueError(f"no motion script for template kind {kind!r}")

    def camera_fn(t: float) -> Pose:
        return spiral_camera(
            t, d_co, turns=camera_turns, elev_amp_deg=elev_amp_deg, elev_cycles=elev_cycles
        )

    return MotionScript(part_fn=part_fn, camera_fn=camera_fn, loops=loops, d_co=d_co)


def _object_bbox_px(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if rows.size == 0:
        return None
    return int(rows[0]), int(rows[-1] + 1), int(cols[0]), int(cols[-1] + 1)


def degrade_observation(
    clean: FeatureImage, frame_index: int, cfg: DegradeConfig, rng: np.random.Generator
) -> Observation:
    """Apply occluders, feature noise and depth distortion to one frame."""
    features = clean.features.copy()
    mask = clean.opacity > 0.5

    if cfg.max_occluders > 0:
        bbox = _object_bbox_px(mask)
        k = int(rng.integers(0, cfg.max_occluders + 1))
        if bbox is not None:
            r0, r1, c0, c1 = bbox
            bh, bw = r1 - r0, c1 - c0
            for _ in range(k):
                frac = rng.uniform(cfg.occluder_min_frac, cfg.occluder_max_frac)
                aspect = rng.uniform(0.5, 2.0)
                oh = max(1, int(round(math.sqrt(frac * bh * bw * aspect))))
                ow = max(1, int(round(math.sqrt(frac * bh * bw / aspect))))
                cy = int(rng.integers(r0, r1))
                cx = int(rng.integers(c0, c1))
                rr0, rr1 = max(0, cy - oh // 2), min(mask.shape[0], cy + (oh + 1) // 2)
                cc0, cc1 = max(0, cx - ow // 2), min(mask.shape[1], cx + (ow + 1) // 2)
                features[rr0:rr1, cc0:cc1] = 0.0
                mask[rr0:rr1, cc0:cc1] = False

    if cfg.feature_noise > 0.0:
        features += cfg.feature_noise * rng.normal(size=features.shape)

    if cfg.depth_distort:
        a = rng.uniform(0.5, 2.0)
        b = rng.uniform(-0.2, 0.2)
    else:
        a, b = 1.0, 0.0
    pseudo_depth = a * clean.depth + b

    return Observation(
        image=FeatureImage(features, clean.depth.copy(), clean.opacity.copy()),
        mask=mask,
        pseudo_depth=pseudo_depth,
        frame_index=frame_index,
        fully_occluded=not bool(mask.any()),
    )


def capture_video(
    template: ObjectTemplate,
    script: MotionScript,
    n_frames: int,
    degrade: DegradeConfig,
    seed: int,
    camera: Camera | None = None,
    sigma: float = 1.0,
) -> Video:
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    if camera is None:
        camera = Camera.default()
    rng = np.random.default_rng(seed)
    observations = []
    gt_poses = []
    for i in range(n_frames):
        t = i / n_frames
        cfg = PoseConfig(script.camera_fn(t), script.part_fn(t))
        clean = render(template, cfg, camera, sigma=sigma)
        observations.append(degrade_observation(clean, i, degrade, rng))
        gt_poses.append(cfg)
    return Video(
        observations=observations,
        gt_poses=gt_poses,
        camera=camera,
        init_obj_cam=script.camera_fn(0.0),
        d_co=script.d_co,
        motion_loops=script.loops,
        seed=seed,
        degrade=degrade,
    )


def _save_raster(path: Path, arr: np.ndarray, dtype: str) -> None:
    with open(path, "wb") as f:
        f.write(np.array(arr.shape, dtype="<i4").tobytes())
        f.write(arr.astype(dtype).tobytes())


def _load_raster(path: Path, dtype: str) -> np.ndarray:
    raw = path.read_bytes()
    h, w = np.frombuffer(raw, dtype="<i4", count=2)
    return np.frombuffer(raw, dtype=dtype, offset=8).reshape(h, w)


def save_video(video: Video, out_dir: str | Path) -> None:
    """Directory layout: manifest.json, gt_poses.json, per-frame binaries."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "camera": video.camera.to_json(),
        "n_frames": video.num_frames,
        "seed": video.seed,
        "d_co": video.d_co,
        "motion_loops": video.motion_loops,
        "degrade": video.degrade.to_json(),
        "init_obj_cam": video.init_obj_cam.to_matrix34(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    (out / "gt_poses.json").write_text(
        json.dumps([p.to_json() for p in video.gt_poses], sort_keys=True)
    )
    for obs in video.observations:
        i = obs.frame_index
        save_feature_image(obs.image, out / f"frame_{i:04d}.bin")
        _save_raster(out / f"mask_{i:04d}.bin", obs.mask, "u1")
        _save_raster(out / f"pseudo_{i:04d}.bin", obs.pseudo_depth, "<f4")


def load_video(in_dir: str | Path) -> Video:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    gt = [PoseConfig.from_json(d) for d in json.loads((src / "gt_poses.json").read_text())]
    observations = []
    for i in range(manifest["n_frames"]):
        img = load_feature_image(src / f"frame_{i:04d}.bin")
        mask = _load_raster(src / f"mask_{i:04d}.bin", "u1").astype(bool)
        pseudo = _load_raster(src / f"pseudo_{i:04d}.bin", "<f4").astype(float)
        observations.append(
            Observation(
                image=img,
                mask=mask,
                pseudo_depth=pseudo,
                frame_index=i,
                fully_occluded=not bool(mask.any()),
            )
        )
    return Video(
        observations=observations,
        gt_poses=gt,
        camera=Camera.from_json(manifest["camera"]),
        init_obj_cam=Pose.from_matrix34(manifest["init_obj_cam"]),
        d_co=float(manifest["d_co"]),
        motion_loops=int(manifest["motion_loops"]),
        seed=int(manifest["seed"]),
        degrade=DegradeConfig.from_json(manifest["degrade"]),
    )
