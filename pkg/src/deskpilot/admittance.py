"""Task-space virtual spring-mass-damper integrator.

Converts external wrenches and reference poses into compliant end-effector
motion. The dynamics are diagonal per axis:

    f_sd = D ξ̇ + K e,   ξ̈ = M⁻¹ (f − f_sd)

integrated with semi-implicit Euler (velocity update first, then position
with the updated velocity). The pose error e is (p − p_ref, axis-angle of
q ⊗ q_ref⁻¹).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .se3 import (
    Pose,
    axis_angle_to_quat,
    quat_conj,
    quat_mul,
    quat_normalize,
    quat_to_axis_angle,
)


@dataclass
class AdmittanceParams:
    """Virtual inertia / damping / stiffness, 6-vectors (xyz + rot xyz).

    Defaults are the simulation settings: K_x=200 N/m, K_r=100 Nm/rad,
    M_x=0.125 kg, M_r=0.015 kg·m², D_x=5 N·s/m, D_r=1.2 N·m·s/rad.
    """

    M: np.ndarray = field(
        default_factory=lambda: np.array([0.125, 0.125, 0.125, 0.015, 0.015, 0.015])
    )
    D: np.ndarray = field(
        default_factory=lambda: np.array([5.0, 5.0, 5.0, 1.2, 1.2, 1.2])
    )
    K: np.ndarray = field(
        default_factory=lambda: np.array([200.0, 200.0, 200.0, 100.0, 100.0, 100.0])
    )

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float).copy()
        self.D = np.asarray(self.D, dtype=float).copy()
        self.K = np.asarray(self.K, dtype=float).copy()
        for name, v in (("M", self.M), ("D", self.D), ("K", self.K)):
            if v.shape != (6,):
                raise ValueError(f"{name} must be a 6-vector")
        if np.any(self.M <= 0):
            raise ValueError("virtual inertia must be strictly positive")
        if np.any(self.D < 0) or np.any(self.K < 0):
            raise ValueError("damping and stiffness must be non-negative")

    def scaled(self, lin_scale: float = 1.0, rot_scale: float = 1.0) -> "AdmittanceParams":
        """Per-episode controller randomization: scale (K_x, K_r, M_x, M_r)."""
        s = np.array([lin_scale] * 3 + [rot_scale] * 3)
        return AdmittanceParams(M=self.M * s, D=self.D.copy(), K=self.K * s)


@dataclass
class Wrench:
    force: np.ndarray
    torque: np.ndarray

    def __post_init__(self):
        self.force = np.asarray(self.force, dtype=float)
        self.torque = np.asarray(self.torque, dtype=float)

    @staticmethod
    def zero() -> "Wrench":
        return Wrench(np.zeros(3), np.zeros(3))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])

    def magnitude(self) -> float:
        f = self.force
        return math.sqrt(f[0] * f[0] + f[1] * f[1] + f[2] * f[2])


@dataclass
class AdmittanceState:
    """Compliant body state: pose, 6D pose coordinates, and task-space velocity.

    xi is (position, axis-angle about the last reference) and is kept
    consistent with pose by step().
    """

    pose: Pose
    xi: np.ndarray = field(default=None)  # type: ignore[assignment]
    xi_dot: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.xi is None:
            self.xi = np.concatenate([self.pose.p, np.zeros(3)])
        if self.xi_dot is None:
            self.xi_dot = np.zeros(6)
        self.xi = np.asarray(self.xi, dtype=float)
        self.xi_dot = np.asarray(self.xi_dot, dtype=float)

    @staticmethod
    def at_rest(pose: Pose) -> "AdmittanceState":
        return AdmittanceState(pose=pose.copy())

    def copy(self) -> "AdmittanceState":
        return AdmittanceState(self.pose.copy(), self.xi.copy(), self.xi_dot.copy())


def pose_error(pose: Pose, ref: Pose) -> np.ndarray:
    """6D error (p − p_ref, axis-angle of q ⊗ q_ref⁻¹)."""
    e_rot = quat_to_axis_angle(quat_mul(pose.q, quat_conj(ref.q)))
    return np.concatenate([pose.p - ref.p, e_rot])


def step(
    state: AdmittanceState,
    params: AdmittanceParams,
    f: Wrench,
    ref: Pose,
    dt: float,
) -> AdmittanceState:
    """One admittance substep toward the reference under external wrench f."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    f_vec = f.to_vector()
    if not np.all(np.isfinite(f_vec)):
        raise ValueError("wrench must be finite")

    e = pose_error(state.pose, ref)
    f_sd = params.D * state.xi_dot + params.K * e
    acc = (f_vec - f_sd) / params.M

    xi_dot = state.xi_dot + dt * acc
    p = state.pose.p + dt * xi_dot[:3]
    dq = axis_angle_to_quat(dt * xi_dot[3:])
    q = quat_normalize(quat_mul(dq, state.pose.q))
    xi = np.concatenate([p, quat_to_axis_angle(quat_mul(q, quat_conj(ref.q)))])
    out = object.__new__(AdmittanceState)
    out.pose = Pose.trusted(p, q)
    out.xi = xi
    out.xi_dot = xi_dot
    return out


def virtual_energy(state: AdmittanceState, params: AdmittanceParams, ref: Pose) -> float:
    """½ ξ̇ᵀMξ̇ + ½ eᵀKe, the Lyapunov candidate for the unforced system."""
    e = pose_error(state.pose, ref)
    return float(
        0.5 * np.dot(state.xi_dot, params.M * state.xi_dot)
        + 0.5 * np.dot(e, params.K * e)
    )


@dataclass
class TwistFilter:
    """First-order low-pass over finite-difference twist estimates.

    coefficient = 1 disables filtering (exact finite differences). A step
    input converges geometrically with ratio (1 − coefficient).
    """

    coefficient: float = 1.0
    y: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        if not 0.0 < self.coefficient <= 1.0:
            raise ValueError("filter coefficient must be in (0, 1]")
        self.y = np.asarray(self.y, dtype=float).copy()

    def reset(self) -> None:
        self.y = np.zeros(6)


def estimate_twist(
    prev: Pose, cur: Pose, dt: float, filter_state: TwistFilter | None = None
) -> np.ndarray:
    """Finite-difference twist (linear, angular) with optional low-pass."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    v = (cur.p - prev.p) / dt
    w = quat_to_axis_angle(quat_mul(cur.q, quat_conj(prev.q))) / dt
    raw = np.concatenate([v, w])
    if filter_state is None:
        return raw
    filter_state.y = filter_state.y + filter_state.coefficient * (raw - filter_state.y)
    return filter_state.y.copy()
