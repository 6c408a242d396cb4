"""Articulated object templates.

A template is a set of rigid parts, each a cloud of feature points
expressed in the part's centroid frame, plus connections between parts
that touch at rest. Templates are normalized so the largest pairwise
point distance is exactly 1 and the union centroid sits at the origin.

Procedural builders produce hinged, sliding and multi-body box
arrangements whose parts carry well-separated feature clusters, so the
feature-image losses can tell parts apart.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import Pose

TEMPLATE_KINDS = ("revolute2", "revolute3", "prismatic2", "multibody3")

CONNECTION_DIST_THRESHOLD = 0.03
CONNECTION_MIN_PAIRS = 3


@dataclass
class Part:
    """Rigid part: feature points in the part's centroid frame."""

    id: int
    positions: np.ndarray  # (N, 3), zero mean
    features: np.ndarray  # (N, D)
    radii: np.ndarray  # (N,)
    rest_frame: Pose  # part frame relative to object frame at rest

    @property
    def num_points(self) -> int:
        return self.positions.shape[0]


@dataclass
class Connection:
    part_a: int
    part_b: int
    centroid: np.ndarray  # (3,) in object frame at rest


@dataclass
class ObjectTemplate:
    parts: list[Part]
    connections: list[Connection]
    bbox_diag: float
    feature_dim: int

    @property
    def num_parts(self) -> int:
        return len(self.parts)

    def rest_config_parts(self) -> list[Pose]:
        return [p.rest_frame.copy() for p in self.parts]


@dataclass
class PoseConfig:
    """One frame's full state: object-to-camera plus per-part poses."""

    obj_cam: Pose
    parts: list[Pose]  # part-to-object, one per template part

    def copy(self) -> "PoseConfig":
        return PoseConfig(self.obj_cam.copy(), [p.copy() for p in self.parts])

    def to_json(self) -> dict:
        return {
            "obj_cam": self.obj_cam.to_matrix34(),
            "parts": [p.to_matrix34() for p in self.parts],
        }

    @staticmethod
    def from_json(d: dict) -> "PoseConfig":
        return PoseConfig(
            Pose.from_matrix34(d["obj_cam"]),
            [Pose.from_matrix34(m) for m in d["parts"]],
        )


def rest_config(template: ObjectTemplate, obj_cam: Pose) -> PoseConfig:
    return PoseConfig(obj_cam.copy(), template.rest_config_parts())


def _sample_box_surface(
    rng: np.random.Generator, center: np.ndarray, half: np.ndarray, n: int
) -> np.ndarray:
    """Uniform points on a box surface, faces weighted by area."""
    areas = np.array(
        [
            half[1] * half[2],  # +-x faces
            half[0] * half[2],  # +-y
            half[0] * half[1],  # +-z
        ]
    )
    probs = np.repeat(areas, 2)
    probs = probs / probs.sum()
    faces = rng.choice(6, size=n, p=probs)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts + center


_BOX_LAYOUTS = {
    # kind -> boxes (center, half_extents) and contact seams
    # (part_a, part_b, seam_center, seam_half_extents)
    "revolute2": {
        "boxes": [
            ((-0.25, 0.0, 0.0), (0.25, 0.20, 0.03)),
            ((0.25, 0.0, 0.0), (0.25, 0.20, 0.03)),
        ],
        "seams": [(0, 1, (0.0, 0.0, 0.0), (0.0, 0.18, 0.025))],
    },
    "revolute3": {
        "boxes": [
            ((-0.30, 0.0, 0.0), (0.15, 0.18, 0.03)),
            ((0.0, 0.0, 0.0), (0.15, 0.18, 0.03)),
            ((0.30, 0.0, 0.0), (0.15, 0.18, 0.03)),
        ],
        "seams": [
            (0, 1, (-0.15, 0.0, 0.0), (0.0, 0.16, 0.025)),
            (1, 2, (0.15, 0.0, 0.0), (0.0, 0.16, 0.025)),
        ],
    },
    "prismatic2": {
        "boxes": [
            ((-0.225, 0.0, 0.0), (0.275, 0.15, 0.15)),
            ((0.25, 0.0, 0.0), (0.25, 0.06, 0.06)),
        ],
        "seams": [(0, 1, (0.03, 0.0, 0.0), (0.0, 0.05, 0.05))],
    },
    "multibody3": {
        "boxes": [
            ((-0.30, 0.0, 0.0), (0.15, 0.15, 0.15)),
            ((0.05, 0.0, 0.0), (0.20, 0.10, 0.10)),
            ((0.37, 0.0, 0.0), (0.12, 0.12, 0.12)),
        ],
        "seams": [
            (0, 1, (-0.15, 0.0, 0.0), (0.0, 0.09, 0.09)),
            (1, 2, (0.25, 0.0, 0.0), (0.0, 0.09, 0.09)),
        ],
    },
}


def _part_feature_means(
    rng: np.random.Generator, num_parts: int, dim: int, min_separation: float
) -> np.ndarray:
    """Unit-norm cluster means with a pairwise separation floor."""
    for _ in range(200):
        mus = rng.normal(size=(num_parts, dim))
        mus /= np.linalg.norm(mus, axis=1, keepdims=True)
        d = np.linalg.norm(mus[:, None] - mus[None, :], axis=-1)
        d[np.diag_indices(num_parts)] = np.inf
        if d.min() >= min_separation:
            return mus
    raise RuntimeError("could not separate feature clusters")


def build_template(
    kind: str,
    points_per_part: int,
    seed: int,
    feature_dim: int = 16,
    point_radius: float = 0.05,
    feature_smoothness: float = 0.3,
) -> ObjectTemplate:
    """Build a normalized procedural template.

    Feature vectors are per-part cluster means plus a smooth linear
    function of position; cluster separation is kept at >= 2x the
    intra-part spread so the feature loss can discriminate parts.
    """
    if kind not in _BOX_LAYOUTS:
        raise ValueError(f"unknown template kind {kind!r}")
    if points_per_part < 4:
        raise ValueError("points_per_part must be >= 4")
    rng = np.random.default_rng(seed)
    layout = _BOX_LAYOUTS[kind]["boxes"]
    seams = _BOX_LAYOUTS[kind]["seams"]

    clouds = [
        _sample_box_surface(rng, np.asarray(c, dtype=float), np.asarray(h, dtype=float), points_per_part)
        for c, h in layout
    ]

    # shared seam points on each contact region keep touching parts
    # connected at any point budget (identical positions in both parts)
    n_seam = min(max(3, points_per_part // 20), points_per_part // 2)
    cursor = [0] * len(layout)
    for a, b, center, half in seams:
        pts = np.asarray(center, dtype=float) + rng.uniform(-1, 1, size=(n_seam, 3)) * np.asarray(half, dtype=float)
        for pid in (a, b):
            lo = cursor[pid]
            clouds[pid][lo : lo + n_seam] = pts
            cursor[pid] += n_seam

    all_pts = np.concatenate(clouds)
    all_pts -= all_pts.mean(axis=0)
    clouds = [all_pts[i * points_per_part : (i + 1) * points_per_part] for i in range(len(layout))]

    # normalize: max pairwise distance across all points becomes 1
    diffs = all_pts[:, None, :] - all_pts[None, :, :]
    scale = 1.0 / float(np.sqrt((diffs**2).sum(axis=-1)).max())
    clouds = [c * scale for c in clouds]

    # intra-part feature spread from the smooth positional term
    spreads = []
    mixers = []
    for c in clouds:
        M = rng.normal(size=(feature_dim, 3))
        mixers.append(M)
        local = c - c.mean(axis=0)
        term = feature_smoothness * local @ M.T
        spreads.append(float(np.linalg.norm(term, axis=1).max()))
    mus = _part_feature_means(rng, len(layout), feature_dim, 2.0 * max(spreads))

    parts = []
    for pid, c in enumerate(clouds):
        centroid = c.mean(axis=0)
        local = c - centroid
        feats = mus[pid][None, :] + feature_smoothness * local @ mixers[pid].T
        parts.append(
            Part(
                id=pid,
                positions=local,
                features=feats,
                radii=np.full(points_per_part, point_radius),  # already in normalized units
                rest_frame=Pose(np.eye(3), centroid),
            )
        )

    template = ObjectTemplate(parts=parts, connections=[], bbox_diag=1.0, feature_dim=feature_dim)
    template.connections = find_connections(template, CONNECTION_DIST_THRESHOLD)
    return template


def find_connections(
    template: ObjectTemplate,
    dist_threshold: float,
    min_pairs: int = CONNECTION_MIN_PAIRS,
) -> list[Connection]:
    """Connect part pairs with enough close point pairs.

    A pair qualifies when at least `min_pairs` point pairs lie within
    `dist_threshold`; the connection centroid is the mean midpoint of all
    qualifying pairs, in the object frame at rest.
    """
    if dist_threshold <= 0:
        raise ValueError("dist_threshold must be positive")
    out = []
    world = [p.rest_frame.apply(p.positions) for p in template.parts]
    for a in range(template.num_parts):
        for b in range(a + 1, template.num_parts):
            d = np.linalg.norm(world[a][:, None, :] - world[b][None, :, :], axis=-1)
            ia, ib = np.nonzero(d < dist_threshold)
            if ia.size >= min_pairs:
                mid = 0.5 * (world[a][ia] + world[b][ib])
                id_a, id_b = template.parts[a].id, template.parts[b].id
                out.append(
                    Connection(
                        part_a=min(id_a, id_b),
                        part_b=max(id_a, id_b),
                        centroid=mid.mean(axis=0),
                    )
                )
    return out


def eval_points(template: ObjectTemplate, n: int, seed: int) -> list[tuple[int, np.ndarray]]:
    """Stratified point sample for ground-truth evaluation.

    Allocation across parts is proportional to part point counts (largest
    remainder rounding); points are drawn without replacement per part.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    counts = np.array([p.num_points for p in template.parts], dtype=float)
    quota = n * counts / counts.sum()
    alloc = np.floor(quota).astype(int)
    remainder = quota - alloc
    for idx in np.argsort(-remainder)[: n - alloc.sum()]:
        alloc[idx] += 1
    out = []
    for part, k in zip(template.parts, alloc):
        if k == 0:
            continue
        replace = k > part.num_points
        idx = rng.choice(part.num_points, size=k, replace=replace)
        for i in idx:
            out.append((part.id, part.positions[i].copy()))
    return out


def template_to_json(template: ObjectTemplate) -> dict:
    return {
        "feature_dim": template.feature_dim,
        "bbox_diag": template.bbox_diag,
        "parts": [
            {
                "id": p.id,
                "rest_frame": p.rest_frame.to_matrix34(),
                "positions": p.positions.tolist(),
                "features": p.features.tolist(),
                "radii": p.radii.tolist(),
            }
            for p in template.parts
        ],
        "connections": [
            {"part_a": c.part_a, "part_b": c.part_b, "centroid": c.centroid.tolist()}
            for c in template.connections
        ],
    }


def template_from_json(d: dict) -> ObjectTemplate:
    parts = [
        Part(
            id=pd["id"],
            positions=np.asarray(pd["positions"], dtype=float),
            features=np.asarray(pd["features"], dtype=float),
            radii=np.asarray(pd["radii"], dtype=float),
            rest_frame=Pose.from_matrix34(pd["rest_frame"]),
        )
        for pd in d["parts"]
    ]
    conns = [
        Connection(c["part_a"], c["part_b"], np.asarray(c["centroid"], dtype=float))
        for c in d["connections"]
    ]
    return ObjectTemplate(
        parts=parts,
        connections=conns,
        bbox_diag=float(d["bbox_diag"]),
        feature_dim=int(d["feature_dim"]),
    )


def save_template(template: ObjectTemplate, path: str | Path) -> None:
    Path(path).write_text(json.dumps(template_to_json(template), sort_keys=True))


def load_template(path: str | Path) -> ObjectTemplate:
    return template_from_json(json.loads(Path(path).read_text()))
