"""Pose, quaternion, and action algebra shared by every other module.

Conventions:
    - Quaternions are stored as (w, x, y, z) and kept unit-norm.
    - q and -q denote the same rotation; canonical form has w >= 0.
    - Base actions are 8D: target fingertip pose (3 pos + 4 quat) + gripper
      openness in [-1, 1].
    - Residual actions are 7D: position delta (3), axis-angle rotation delta
      (3), gripper delta (1), each normalized to [-1, 1] before scaling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

QUAT_NORM_TOL = 1e-9
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Normalize to unit length and canonicalize the sign so w >= 0.

    Inputs already unit to within 1e-12 pass through bit-exactly (sign flip
    aside): re-dividing would perturb the last bits of stored commands.
    """
    q = np.asarray(q, dtype=float)
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if n < 1e-12:
        return IDENTITY_QUAT.copy()
    if abs(n - 1.0) > 1e-12:
        q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b."""
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector v by quaternion q: v' = v + w*t + u x t, t = 2(u x v)."""
    w, x, y, z = q
    vx, vy, vz = v
    tx = 2.0 * (y * vz - z * vy)
    ty = 2.0 * (z * vx - x * vz)
    tz = 2.0 * (x * vy - y * vx)
    return np.array(
        [
            vx + w * tx + (y * tz - z * ty),
            vy + w * ty + (z * tx - x * tz),
            vz + w * tz + (x * ty - y * tx),
        ]
    )


def cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product of two 3-vectors without generic-axis dispatch."""
    return np.array(
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    )


def _check_unit(q: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
    n = np.linalg.norm(q)
    if abs(n - 1.0) > tol:
        raise ValueError(f"quaternion norm {n} is not unit within {tol}")
    return q


def quat_geodesic(q1: np.ndarray, q2: np.ndarray) -> float:
    """Geodesic distance between two unit quaternions, in [0, pi].

    Sign-invariant: q and -q are the same rotation. Raises ValueError for
    inputs whose norm deviates from 1 beyond tolerance.
    """
    q1 = _check_unit(q1)
    q2 = _check_unit(q2)
    if np.array_equal(q1, q2) or np.array_equal(q1, -q2):
        return 0.0
    rel = quat_mul(quat_conj(q1), q2)
    # atan2 form is accurate near both 0 and pi
    return 2.0 * np.arctan2(np.linalg.norm(rel[1:]), abs(rel[0]))


def axis_angle_to_quat(v: np.ndarray) -> np.ndarray:
    """Quaternion rotating by ||v|| radians about v. Zero vector -> identity."""
    v = np.asarray(v, dtype=float)
    angle = math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    if angle < 1e-12:
        # first-order form keeps the map smooth through zero
        q = np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]])
        return quat_normalize(q)
    half = 0.5 * angle
    s = math.sin(half) / angle
    return quat_normalize(np.array([math.cos(half), v[0] * s, v[1] * s, v[2] * s]))


def quat_to_axis_angle(q: np.ndarray) -> np.ndarray:
    """Inverse of axis_angle_to_quat, returning the vector with angle in [0, pi]."""
    q = quat_normalize(q)
    s = math.sqrt(q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if s < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * math.atan2(s, q[0])
    return q[1:] * (angle / s)


@dataclass
class Pose:
    """Rigid pose: position (m) + unit quaternion (w, x, y, z), w >= 0.

    The constructor takes ownership of its arrays (no defensive copy); use
    copy() when sharing.
    """

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.q = quat_normalize(self.q)

    def copy(self) -> "Pose":
        return Pose(self.p.copy(), self.q.copy())

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), IDENTITY_QUAT.copy())

    @staticmethod
    def trusted(p: np.ndarray, q: np.ndarray) -> "Pose":
        """Fast constructor: the caller guarantees q is unit and canonical."""
        self = object.__new__(Pose)
        self.p = p
        self.q = q
        return self

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply other in self's frame."""
        return Pose(self.p + quat_rotate(self.q, other.p), quat_mul(self.q, other.q))

    def inverse(self) -> "Pose":
        qi = quat_conj(self.q)
        return Pose(-quat_rotate(qi, self.p), qi)


@dataclass
class BaseAction:
    """8D pilot command: target fingertip pose + gripper openness in [-1, 1]."""

    pose: Pose
    gripper: float

    def __post_init__(self):
        self.gripper = float(np.clip(self.gripper, -1.0, 1.0))

    def copy(self) -> "BaseAction":
        return BaseAction(self.pose.copy(), self.gripper)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.pose.p, self.pose.q, [self.gripper]])

    @staticmethod
    def from_vector(v: np.ndarray) -> "BaseAction":
        v = np.asarray(v, dtype=float)
        if v.shape != (8,):
            raise ValueError(f"base action vector must have shape (8,), got {v.shape}")
        return BaseAction(Pose(v[0:3], v[3:7]), float(v[7]))


@dataclass
class ResidualAction:
    """7D correction: position delta, axis-angle rotation delta, gripper delta."""

    dp: np.ndarray
    dtheta: np.ndarray
    du: float

    def __post_init__(self):
        self.dp = np.asarray(self.dp, dtype=float).copy()
        self.dtheta = np.asarray(self.dtheta, dtype=float).copy()
        self.du = float(self.du)

    @staticmethod
    def zero() -> "ResidualAction":
        return ResidualAction(np.zeros(3), np.zeros(3), 0.0)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.dp, self.dtheta, [self.du]])

    @staticmethod
    def from_vector(v: np.ndarray) -> "ResidualAction":
        v = np.asarray(v, dtype=float)
        if v.shape != (7,):
            raise ValueError(f"residual vector must have shape (7,), got {v.shape}")
        return ResidualAction(v[0:3], v[3:6], float(v[6]))

    def norm(self) -> float:
        return float(np.linalg.norm(self.to_vector()))


@dataclass
class ResidualScale:
    """Maps normalized residual components to physical magnitudes."""

    s_p: float = 0.01  # meters per unit
    s_r: float = 0.1  # radians per unit
    s_u: float = 0.2  # openness per unit

    def __post_init__(self):
        if self.s_p <= 0 or self.s_r <= 0 or self.s_u <= 0:
            raise ValueError("residual scales must be strictly positive")


def compose_residual(
    base: BaseAction, res: ResidualAction, scale: ResidualScale
) -> BaseAction:
    """Compose a base action with a scaled residual.

    Translation and gripper increments are additive; the rotation increment is
    applied multiplicatively: q' = quat(s_r * dtheta) ⊗ q. Gripper saturates
    at [-1, 1].
    """
    p = base.pose.p + scale.s_p * res.dp
    dq = axis_angle_to_quat(scale.s_r * res.dtheta)
    q = quat_normalize(quat_mul(dq, base.pose.q))
    u = float(np.clip(base.gripper + scale.s_u * res.du, -1.0, 1.0))
    return BaseAction(Pose(p, q), u)


@dataclass
class RunningNormalizer:
    """Running mean/variance standardizer with output clipping.

    Uses population variance (M2 / count). Once frozen, update() is a no-op
    and the instance is freely shareable read-only.
    """

    dim: int
    mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    var: np.ndarray = field(default=None)  # type: ignore[assignment]
    count: int = 0
    frozen: bool = False
    clip: float = 5.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.var is None:
            self.var = np.ones(self.dim)
        self.mean = np.asarray(self.mean, dtype=float).copy()
        self.var = np.asarray(self.var, dtype=float).copy()

    def update(self, x: np.ndarray) -> None:
        """Fold one vector or a (n, dim) batch into the statistics."""
        if self.frozen:
            return
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {x.shape[1]}")
        n = x.shape[0]
        batch_mean = x.mean(axis=0)
        batch_var = x.var(axis=0)
        if self.count == 0:
            self.mean = batch_mean
            self.var = batch_var
            self.count = n
            return
        # Chan et al. parallel combine of (mean, M2, count)
        total = self.count + n
        delta = batch_mean - self.mean
        m2 = self.var * self.count + batch_var * n + delta**2 * self.count * n / total
        self.mean = self.mean + delta * n / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {x.shape[-1]}")
        if self.count == 0:
            return np.clip(x, -self.clip, self.clip)
        std = np.maximum(np.sqrt(self.var), self.eps)
        return np.clip((x - self.mean) / std, -self.clip, self.clip)

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {y.shape[-1]}")
        if self.count == 0:
            return y.copy()
        std = np.maximum(np.sqrt(self.var), self.eps)
        return y * std + self.mean

    def freeze(self) -> None:
        self.frozen = True

    def state_dict(self) -> dict:
        return {
            "dim": self.dim,
            "mean": self.mean.tolist(),
            "var": self.var.tolist(),
            "count": self.count,
            "frozen": self.frozen,
            "clip": self.clip,
            "eps": self.eps,
        }

    @staticmethod
    def from_state_dict(d: dict) -> "RunningNormalizer":
        return RunningNormalizer(
            dim=d["dim"],
            mean=np.array(d["mean"]),
            var=np.array(d["var"]),
            count=d["count"],
            frozen=d["frozen"],
            clip=d.get("clip", 5.0),
            eps=d.get("eps", 1e-8),
        )
