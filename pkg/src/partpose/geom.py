"""Rigid-body math on SO(3)/SE(3).

Conventions used throughout the package:

- Rotations are 3x3 orthonormal matrices with det +1.
- A rigid transform (Pose) is (R, t); it maps x to R @ x + t.
- Twists are 6-vectors ordered (wx, wy, wz, vx, vy, vz): rotational
  tangent coordinates first, translational second.
- se3_exp / se3_log are the proper SE(3) exponential and logarithm
  (translation coupled through the SO(3) left Jacobian).

Small-angle branches switch to Taylor expansions below ANGLE_EPS; the
logarithm refuses rotations within PI_MARGIN of the pi singularity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.fft

ANGLE_EPS = 1e-8
PI_MARGIN = 1e-6


class DegenerateRotationError(ValueError):
    """Rotation logarithm requested too close to the pi singularity."""


class InvalidRot6DError(ValueError):
    """6D rotation input is zero or (nearly) parallel."""


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric (hat) matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula: rotation vector to rotation matrix."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < ANGLE_EPS:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to rotation vector; errors within PI_MARGIN of pi."""
    R = np.asarray(R, dtype=float)
    sym = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(sym))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(s, c)
    if theta > math.pi - PI_MARGIN:
        raise DegenerateRotationError(f"rotation angle {theta:.9f} too close to pi")
    if theta < ANGLE_EPS:
        return sym
    return sym * (theta / s)


def _jl_coeffs(theta: float) -> tuple[float, float]:
    """Coefficients b, c of J_l = I + b K + c K^2 for K = skew(w)."""
    if theta < ANGLE_EPS:
        return 0.5 - theta * theta / 24.0, 1.0 / 6.0 - theta * theta / 120.0
    b = (1.0 - math.cos(theta)) / (theta * theta)
    c = (theta - math.sin(theta)) / (theta ** 3)
    return b, c


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    K = skew(w)
    b, c = _jl_coeffs(theta)
    return np.eye(3) + b * K + c * (K @ K)


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < ANGLE_EPS:
        d = 1.0 / 12.0 + theta * theta / 720.0
    else:
        d = 1.0 / (theta * theta) - (1.0 + math.cos(theta)) / (
            2.0 * theta * math.sin(theta)
        )
    return np.eye(3) - 0.5 * K + d * (K @ K)


@dataclass
class Pose:
    """Rigid transform: x -> rot @ x + t. Treat instances as immutable."""

    rot: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rot @ other.rot, self.rot @ other.t + self.t)

    def inverse(self) -> "Pose":
        rt = self.rot.T
        return Pose(rt.copy(), -rt @ self.t)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Transform one 3-vector or an (N, 3) stack of points."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.rot @ x + self.t
        return x @ self.rot.T + self.t

    def copy(self) -> "Pose":
        return Pose(self.rot.copy(), self.t.copy())

    def to_matrix34(self) -> list:
        """Row-major 3x4 nested list, the JSON wire format for poses."""
        m = np.concatenate([self.rot, self.t[:, None]], axis=1)
        return [[float(v) for v in row] for row in m]

    @staticmethod
    def from_matrix34(rows: Sequence[Sequence[float]]) -> "Pose":
        m = np.asarray(rows, dtype=float)
        if m.shape != (3, 4):
            raise ValueError(f"expected 3x4 pose matrix, got shape {m.shape}")
        return Pose(m[:, :3].copy(), m[:, 3].copy())


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map from a twist (w, v) to a Pose."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    return Pose(so3_exp(w), so3_left_jacobian(w) @ v)


def se3_log(T: Pose) -> np.ndarray:
    """Logarithm map; inverse of se3_exp away from the pi singularity."""
    w = so3_log(T.rot)
    v = so3_left_jacobian_inv(w) @ T.t
    return np.concatenate([w, v])


def _se3_q_matrix(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Translation-rotation coupling block of the SE(3) left Jacobian."""
    theta = float(np.linalg.norm(w))
    W = skew(w)
    V = skew(v)
    _, c = _jl_coeffs(theta)
    if theta < ANGLE_EPS:
        e = -1.0 / 24.0 + theta * theta / 720.0
        f = -1.0 / 120.0 + theta * theta / 5040.0
    else:
        e = (1.0 - theta * theta / 2.0 - math.cos(theta)) / theta ** 4
        f = (theta - math.sin(theta) - theta ** 3 / 6.0) / theta ** 5
    WV, VW = W @ V, V @ W
    q = 0.5 * V
    q += c * (WV + VW + W @ VW)
    q -= e * (W @ WV + VW @ W - 3.0 * W @ VW)
    q -= 0.5 * (e - 3.0 * f) * (WV @ W @ W + W @ W @ VW)
    return q


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """6x6 left Jacobian: exp(xi + d) ~ exp(J_l(xi) @ d) * exp(xi)."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    J = so3_left_jacobian(w)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[3:, :3] = _se3_q_matrix(w, v)
    return out


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    Jinv = so3_left_jacobian_inv(w)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[3:, :3] = -Jinv @ _se3_q_matrix(w, v) @ Jinv
    return out


def se3_right_jacobian(xi: np.ndarray) -> np.ndarray:
    """exp(xi + d) ~ exp(xi) * exp(J_r(xi) @ d)."""
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def se3_adjoint(T: Pose) -> np.ndarray:
    """6x6 adjoint: T * exp(d) = exp(Ad_T @ d) * T, twist order (w, v)."""
    out = np.zeros((6, 6))
    out[:3, :3] = T.rot
    out[3:, 3:] = T.rot
    out[3:, :3] = skew(T.t) @ T.rot
    return out


def gram_schmidt(r6: np.ndarray) -> np.ndarray:
    """Orthonormalize two 3-vectors into a rotation matrix.

    Input is (a, b) concatenated into 6 values; the output's first column
    is normalize(a), the second the normalized rejection of b from a, the
    third their cross product.
    """
    r6 = np.asarray(r6, dtype=float).reshape(6)
    a, b = r6[:3], r6[3:]
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < 1e-12 or nb < 1e-12:
        raise InvalidRot6DError("zero vector in 6D rotation input")
    c1 = a / na
    u = b - (c1 @ b) * c1
    if np.linalg.norm(u) <= 1e-6 * nb:
        raise InvalidRot6DError("parallel vectors in 6D rotation input")
    c2 = u / np.linalg.norm(u)
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=1)


def gram_schmidt_jacobian(r6: np.ndarray) -> np.ndarray:
    """d vec(R) / d r6, shape (9, 6); vec(R) is row-major R.ravel()."""
    r6 = np.asarray(r6, dtype=float).reshape(6)
    a, b = r6[:3], r6[3:]
    na = float(np.linalg.norm(a))
    c1 = a / na
    u = b - (c1 @ b) * c1
    nu = float(np.linalg.norm(u))
    c2 = u / nu

    dc1_da = (np.eye(3) - np.outer(c1, c1)) / na
    du_dc1 = -(np.outer(c1, b) + (c1 @ b) * np.eye(3))
    du_db = np.eye(3) - np.outer(c1, c1)
    dc2_du = (np.eye(3) - np.outer(c2, c2)) / nu
    dc2_da = dc2_du @ du_dc1 @ dc1_da
    dc2_db = dc2_du @ du_db
    dc3_da = -skew(c2) @ dc1_da + skew(c1) @ dc2_da
    dc3_db = skew(c1) @ dc2_db

    dR = np.zeros((3, 3, 6))
    dR[:, 0, :3] = dc1_da
    dR[:, 1, :3] = dc2_da
    dR[:, 2, :3] = dc3_da
    dR[:, 1, 3:] = dc2_db
    dR[:, 2, 3:] = dc3_db
    return dR.reshape(9, 6)


def rot6d_from_rotation(R: np.ndarray) -> np.ndarray:
    """First two columns of R, the 6D training-label convention."""
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[:, 0], R[:, 1]])


def rotation_geodesic(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations."""
    return float(np.linalg.norm(so3_log(Ra.T @ Rb)))


def se3_distance(a: Pose, b: Pose, lambda_t: float = 1.0) -> float:
    """Rotation geodesic plus weighted translation distance."""
    if lambda_t <= 0:
        raise ValueError("lambda_t must be positive")
    return rotation_geodesic(a.rot, b.rot) + lambda_t * float(
        np.linalg.norm(a.t - b.t)
    )


def pose_interpolate(a: Pose, b: Pose, alpha: float) -> Pose:
    """Geodesic interpolation, alpha=0 -> a, alpha=1 -> b."""
    return a.compose(se3_exp(alpha * se3_log(a.inverse().compose(b))))


def dct_lowpass(poses: Sequence[Pose], keep_fraction: float) -> list[Pose]:
    """Low-pass filter a pose sequence along time.

    Poses are mapped to twists relative to the first frame, each of the 6
    channels is DCT-II transformed, coefficients with index >=
    ceil(keep_fraction * T) are zeroed, and the result is mapped back
    through the exponential. The filtered twists are re-anchored so the
    first frame is reproduced exactly; the anchor shift lives in the DC
    bin, which keeps the whole filter an exact projector (idempotent).
    """
    n = len(poses)
    if n < 2:
        raise ValueError("need at least 2 poses")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must be in (0, 1]")
    base = poses[0]
    base_inv = base.inverse()
    x = np.stack([se3_log(base_inv.compose(p)) for p in poses])  # (T, 6)
    coeffs = scipy.fft.dct(x, axis=0, norm="ortho")
    k = math.ceil(keep_fraction * n)
    coeffs[k:] = 0.0
    y = scipy.fft.idct(coeffs, axis=0, norm="ortho")
    y = y - y[0]
    return [base.compose(se3_exp(y[i])) for i in range(n)]


def dct_lowpass_windowed(
    poses: Sequence[Pose], keep_fraction: float, window: int
) -> list[Pose]:
    """Apply dct_lowpass over consecutive windows of the sequence.

    Frame-0-relative twists are only defined while the relative rotation
    stays below pi; trajectories that orbit the object (multi-turn camera
    paths) exceed that, so they are filtered in windows short enough that
    the relative rotation within each window stays small.
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    out: list[Pose] = []
    for start in range(0, len(poses), window):
        chunk = list(poses[start : start + window])
        if len(chunk) < 4:
            out.extend(p.copy() for p in chunk)
        else:
            out.extend(dct_lowpass(chunk, keep_fraction))
    return out


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation from a random twist (test helper)."""
    w = rng.normal(size=3)
    w = w / np.linalg.norm(w) * rng.uniform(0.0, math.pi - 0.2)
    return so3_exp(w)


def random_pose(rng: np.random.Generator, trans_scale: float = 1.0) -> Pose:
    return Pose(random_rotation(rng), rng.normal(size=3) * trans_scale)
