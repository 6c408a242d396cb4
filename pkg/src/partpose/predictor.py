"""Feed-forward pose regressor.

One masked observation maps to a full pose configuration: features
outside the object mask are zeroed, average-pooled into a G x G
descriptor grid, and pushed through a two-hidden-layer tanh MLP whose
head emits 9 values (6D rotation + translation) for the object pose and
for every part pose. Training minimizes mean L1 over all outputs
against labels whose rotations are encoded as the first two rotation
matrix columns.

Backprop and the adaptive-moment optimizer are written out by hand;
`backward_check` gates them against central finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .capture import Observation
from .geom import Pose, gram_schmidt, rot6d_from_rotation
from .render import FeatureImage
from .scene import PoseConfig

MAGIC = b"PPRD"
CHECKPOINT_VERSION = 1


class EmptyMaskError(ValueError):
    """No object pixels to pool a descriptor from."""


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class AugmentConfig:
    feature_jitter: float = 0.01
    rect_prob: float = 0.5
    rect_max_cells: int = 4  # max zeroed-rectangle side, in grid cells

    @staticmethod
    def off() -> "AugmentConfig":
        return AugmentConfig(feature_jitter=0.0, rect_prob=0.0)


@dataclass
class TrainSample:
    descriptor: np.ndarray  # (G, G, D) pooled masked render
    label_vec: np.ndarray  # (9 * (P + 1),)
    label: PoseConfig
    image: FeatureImage | None = None  # retained only on request


@dataclass
class PredictorParams:
    num_parts: int
    feature_dim: int
    grid: int
    hidden: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def out_dim(self) -> int:
        return 9 * (self.num_parts + 1)

    def copy(self) -> "PredictorParams":
        return PredictorParams(
            self.num_parts,
            self.feature_dim,
            self.grid,
            self.hidden,
            {k: v.copy() for k, v in self.tensors.items()},
        )


def init_params(
    num_parts: int, feature_dim: int, grid: int = 8, hidden: int = 256, seed: int = 0
) -> PredictorParams:
    rng = np.random.default_rng(seed)
    in_dim = grid * grid * feature_dim
    out_dim = 9 * (num_parts + 1)
    dims = [in_dim, hidden, hidden, out_dim]
    tensors = {}
    for layer in range(3):
        fan_in, fan_out = dims[layer], dims[layer + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[f"W{layer + 1}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        tensors[f"b{layer + 1}"] = np.zeros(fan_out)
    # biasing the rotation slots toward the identity 6D encoding keeps
    # gram_schmidt well-defined from the first forward pass
    b3 = tensors["b3"]
    for head in range(num_parts + 1):
        b3[head * 9 + 0] = 1.0
        b3[head * 9 + 4] = 1.0
    return PredictorParams(num_parts, feature_dim, grid, hidden, tensors)


def pool_descriptor(features: np.ndarray, mask: np.ndarray, grid: int) -> np.ndarray:
    """Zero features outside the mask, then average-pool to grid x grid."""
    H, W, D = features.shape
    masked = features * mask[:, :, None]
    re = np.linspace(0, H, grid + 1).astype(int)
    ce = np.linspace(0, W, grid + 1).astype(int)
    out = np.zeros((grid, grid, D))
    for i in range(grid):
        for j in range(grid):
            cell = masked[re[i] : re[i + 1], ce[j] : ce[j + 1]]
            out[i, j] = cell.mean(axis=(0, 1))
    return out


def _forward(params: PredictorParams, x: np.ndarray):
    t = params.tensors
    z1 = x @ t["W1"] + t["b1"]
    a1 = np.tanh(z1)
    z2 = a1 @ t["W2"] + t["b2"]
    a2 = np.tanh(z2)
    y = a2 @ t["W3"] + t["b3"]
    return y, (x, a1, a2)


def _l1_loss_and_grads(params: PredictorParams, x: np.ndarray, target: np.ndarray):
    y, (x0, a1, a2) = _forward(params, x)
    resid = y - target
    loss = float(np.mean(np.abs(resid)))
    dy = np.sign(resid) / resid.size
    t = params.tensors
    grads = {}
    grads["W3"] = a2.T @ dy
    grads["b3"] = dy.sum(axis=0)
    da2 = dy @ t["W3"].T
    dz2 = da2 * (1.0 - a2 * a2)
    grads["W2"] = a1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    da1 = dz2 @ t["W2"].T
    dz1 = da1 * (1.0 - a1 * a1)
    grads["W1"] = x0.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return loss, grads


class Adam:
    """Adaptive moment estimation over a dict of parameter tensors."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k in sorted(tensors):
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(tensors[k])
                self.v[k] = np.zeros_like(tensors[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            tensors[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def labels_from_config(cfg: PoseConfig) -> np.ndarray:
    chunks = []
    for pose in [cfg.obj_cam] + list(cfg.parts):
        chunks.append(rot6d_from_rotation(pose.rot))
        chunks.append(pose.t)
    return np.concatenate(chunks)


def config_from_output(y: np.ndarray) -> PoseConfig:
    heads = y.reshape(-1, 9)
    poses = [Pose(gram_schmidt(h[:6]), h[6:].copy()) for h in heads]
    return PoseConfig(poses[0], poses[1:])


def predict(params: PredictorParams, obs: Observation) -> PoseConfig:
    if not obs.mask.any():
        raise EmptyMaskError(f"frame {obs.frame_index}: empty mask, no prediction")
    desc = pool_descriptor(obs.image.features, obs.mask, params.grid)
    y, _ = _forward(params, desc.reshape(1, -1))
    return config_from_output(y[0])


def _augment_batch(
    X: np.ndarray, grid: int, feature_dim: int, aug: AugmentConfig, rng: np.random.Generator
) -> np.ndarray:
    B = X.shape[0]
    Xa = X.copy()
    if aug.feature_jitter > 0.0:
        Xa += aug.feature_jitter * rng.normal(size=Xa.shape)
    if aug.rect_prob > 0.0:
        G = grid
        grids = Xa.reshape(B, G, G, feature_dim)
        for b in range(B):
            if rng.uniform() >= aug.rect_prob:
                continue
            rh = int(rng.integers(1, aug.rect_max_cells + 1))
            rw = int(rng.integers(1, aug.rect_max_cells + 1))
            r0 = int(rng.integers(0, G - rh + 1))
            c0 = int(rng.integers(0, G - rw + 1))
            grids[b, r0 : r0 + rh, c0 : c0 + rw] = 0.0
    return Xa


def train(
    params: PredictorParams,
    dataset: list[TrainSample],
    epochs: int,
    batch: int,
    lr: float,
    augment: AugmentConfig | None = None,
    seed: int = 0,
    lr_final: float | None = None,
) -> tuple[PredictorParams, list[float]]:
    """Train in place on pooled descriptors; returns params and the loss curve.

    With L1 loss the adaptive optimizer plateaus at a floor proportional
    to the step size, so `lr_final` enables exponential decay across the
    run (default: decay to lr / 100).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    aug = augment if augment is not None else AugmentConfig()
    if lr_final is None:
        lr_final = lr / 100.0
    rng = np.random.default_rng(seed)
    X = np.stack([s.descriptor.reshape(-1) for s in dataset])
    Y = np.stack([s.label_vec for s in dataset])
    n = X.shape[0]
    batch = max(1, min(batch, n))
    opt = Adam(lr=lr)
    curve = []
    for epoch in range(epochs):
        if epochs > 1 and lr > 0.0:
            opt.lr = lr * (lr_final / lr) ** (epoch / (epochs - 1))
        order = rng.permutation(n)
        total = 0.0
        seen = 0
        for lo in range(0, n, batch):
            idx = order[lo : lo + batch]
            xb = _augment_batch(X[idx], params.grid, params.feature_dim, aug, rng)
            loss, grads = _l1_loss_and_grads(params, xb, Y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} (lr={lr}, batch={batch})"
                )
            opt.step(params.tensors, grads)
            total += loss * len(idx)
            seen += len(idx)
        curve.append(total / seen)
    return params, curve


def backward_check(
    params: PredictorParams,
    x: np.ndarray,
    target: np.ndarray,
    max_entries_per_tensor: int | None = None,
    h: float = 1e-6,
    seed: int = 0,
) -> float:
    """Max relative error of analytic parameter gradients vs central FD."""
    _, grads = _l1_loss_and_grads(params, x, target)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(params.tensors):
        tensor = params.tensors[name]
        flat = tensor.reshape(-1)
        gflat = grads[name].reshape(-1)
        if max_entries_per_tensor is None or flat.size <= max_entries_per_tensor:
            entries = np.arange(flat.size)
        else:
            entries = rng.choice(flat.size, size=max_entries_per_tensor, replace=False)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = _l1_loss_and_grads(params, x, target)
            flat[i] = orig - h
            lm, _ = _l1_loss_and_grads(params, x, target)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            denom = max(abs(fd), abs(gflat[i]))
            if denom < 1e-10:
                continue
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst


def save_checkpoint(params: PredictorParams, path: str | Path) -> None:
    """Versioned binary: magic, version, P, D, G, hidden, then per-tensor
    shape headers and little-endian float32 data."""
    names = sorted(params.tensors)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(
            struct.pack(
                "<iiiii",
                CHECKPOINT_VERSION,
                params.num_parts,
                params.feature_dim,
                params.grid,
                params.hidden,
            )
        )
        f.write(struct.pack("<i", len(names)))
        for name in names:
            t = params.tensors[name]
            nb = name.encode()
            f.write(struct.pack("<i", len(nb)))
            f.write(nb)
            f.write(struct.pack("<i", t.ndim))
            f.write(np.array(t.shape, dtype="<i4").tobytes())
            f.write(t.astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> PredictorParams:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError("not a predictor checkpoint")
    version, P, D, G, hidden = struct.unpack_from("<iiiii", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (n_tensors,) = struct.unpack_from("<i", raw, 24)
    off = 28
    tensors = {}
    for _ in range(n_tensors):
        (ln,) = struct.unpack_from("<i", raw, off)
        off += 4
        name = raw[off : off + ln].decode()
        off += ln
        (nd,) = struct.unpack_from("<i", raw, off)
        off += 4
        shape = tuple(np.frombuffer(raw, dtype="<i4", count=nd, offset=off))
        off += 4 * nd
        count = int(np.prod(shape))
        tensors[name] = (
            np.frombuffer(raw, dtype="<f4", count=count, offset=off)
            .reshape(shape)
            .astype(float)
        )
        off += 4 * count
    return PredictorParams(P, D, G, hidden, tensors)
