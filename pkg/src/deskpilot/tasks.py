"""Simplified contact-rich assembly environments: peg, gear, nut.

A single free task-space body (the fingertip) moves under admittance control.
The held part is rigidly attached after a grasp and interacts with the fixture
through an analytic contact model: a chamfered insertion funnel, bore wall,
floor, and surrounding plates, each producing a spring force k_c * penetration
along the surface normal plus Coulomb-capped viscous friction.

Task structure:
  - peg:  insert the peg into a chamfered hole until the tip reaches the
          bore floor.
  - gear: slide the gear hub down a shaft; the final drop to the seat is
          blocked unless the hub yaw phase is within the tooth-alignment band.
  - nut:  thread the nut onto a bolt; once engaged the motion follows a
          kinematic screw joint and success requires a cumulative 180 deg of
          tightening rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import admittance as adm
from .se3 import (
    BaseAction,
    Pose,
    ResidualAction,
    axis_angle_to_quat,
    cross3,
    quat_mul,
    quat_rotate,
)

TASK_KINDS = ("peg", "gear", "nut")

STATE_DIM = 20
OBS_DIM = 35

GRIP_CLOSE_THRESHOLD = -0.5
GRIP_OPEN_THRESHOLD = 0.0


@dataclass
class TaskSpec:
    """Geometry, clearances, and physics parameters for one task."""

    kind: str
    hole_radius: float
    part_radius: float
    insertion_depth: float
    part_length: float
    success_pose: Pose
    success_tol: float = 0.0025
    e_max: float = 0.15
    force_limit: float = 30.0
    mu: float = 0.5
    part_com: np.ndarray = field(default_factory=lambda: np.zeros(3))
    part_mass: float = 0.05
    screw_pitch: float = 0.0  # meters per radian, nut only

    # fixture layout
    axis_xy: np.ndarray = field(default_factory=lambda: np.array([0.08, 0.0]))
    entry_z: float = 0.02  # top of the bore / shaft / bolt
    plate_radius: float = 0.04  # solid plane at entry_z around the axis
    base_radius: float = 0.04
    base_z: float = 0.02
    table_z: float = 0.0
    chamfer: float = 0.002

    # contact model
    contact_stiffness: float = 5000.0
    friction_viscous: float = 100.0
    penetration_cap: float = 0.01

    # grasping
    capture_radius: float = 0.005
    slip_bound: float = 12.0
    gravity_tared: bool = True

    # part initial placement (center xy; z follows from table contact)
    part_init_xy: np.ndarray = field(default_factory=lambda: np.array([-0.08, 0.0]))

    # robot initial fingertip pose
    robot_init: Pose = field(
        default_factory=lambda: Pose(np.array([0.0, 0.0, 0.16]), np.array([1.0, 0, 0, 0]))
    )

    # gear meshing: tooth height must exceed success_tol by a clear margin so
    # a misaligned gear resting on the tooth crowns cannot register success
    n_teeth: int = 20
    tooth_height: float = 0.006
    phase_band: float = 0.05  # radians

    # nut threading
    engage_depth: float = 0.002
    engage_radial_tol: float = 0.0005
    engage_tilt_tol: float = 0.15
    yaw_target: float = math.pi

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.part_radius >= self.hole_radius:
            raise ValueError("part_radius must be smaller than hole_radius")
        if self.e_max <= 0 or self.force_limit <= 0:
            raise ValueError("e_max and force_limit must be positive")
        self.part_com = np.asarray(self.part_com, dtype=float).copy()
        self.axis_xy = np.asarray(self.axis_xy, dtype=float).copy()
        self.part_init_xy = np.asarray(self.part_init_xy, dtype=float).copy()

    @property
    def clearance(self) -> float:
        """Radial clearance between part and bore center lines."""
        return self.hole_radius - self.part_radius

    @property
    def bore_floor_z(self) -> float:
        return self.entry_z - self.insertion_depth


def make_task_spec(kind: str) -> TaskSpec:
    """Default desk-scale geometry for each task kind."""
    if kind == "peg":
        success_pose = Pose(np.array([0.08, 0.0, 0.025]), np.array([1.0, 0, 0, 0]))
        return TaskSpec(
            kind="peg",
            hole_radius=0.0044,
            part_radius=0.004,
            insertion_depth=0.015,
            part_length=0.04,
            success_pose=success_pose,
            entry_z=0.02,
            plate_radius=0.04,
            base_radius=0.04,
            base_z=0.02,
        )
    if kind == "gear":
        # hub bore slides over the shaft; the seat sits on the base plate
        success_pose = Pose(np.array([0.08, 0.0, 0.0125]), np.array([1.0, 0, 0, 0]))
        return TaskSpec(
            kind="gear",
            hole_radius=0.0034,
            part_radius=0.003,
            insertion_depth=0.040,
            part_length=0.015,
            success_pose=success_pose,
            entry_z=0.045,
            plate_radius=0.008,
            base_radius=0.05,
            base_z=0.005,
        )
    if kind == "nut":
        # tip after a 180 deg tighten: (entry - engage_depth) - pitch * pi
        success_pose = Pose(np.array([0.08, 0.0, 0.05225]), np.array([1.0, 0, 0, 0]))
        return TaskSpec(
            kind="nut",
            hole_radius=0.0164,
            part_radius=0.016,
            insertion_depth=0.002,
            part_length=0.012,
            success_pose=success_pose,
            e_max=math.pi / 2,
            screw_pitch=5.57e-4,
            entry_z=0.05,
            plate_radius=0.021,
            base_radius=0.05,
            base_z=0.005,
            engage_depth=0.002,
        )
    raise ValueError(f"unknown task kind {kind!r}")


@dataclass
class RewardConfig:
    """Per-term reward scales; defaults follow the shared reward table."""

    regularization: float = 0.1
    tilt: float = 1.0
    force: float = 0.2
    axis_align: float = 0.05
    smoothness: float = 0.1
    termination: float = 50.0
    success: float = 30.0
    align_radius: float = 0.005
    force_clip: float = 20.0

    def __post_init__(self):
        for name in ("regularization", "tilt", "force", "axis_align", "smoothness",
                     "termination", "success"):
            if getattr(self, name) < 0:
                raise ValueError(f"reward scale {name} must be >= 0")


@dataclass
class DmrConfig:
    """Domain randomization ranges. Per-episode sampling unless noted;
    base-action noise (chunk length, gate) is sampled per timestep by the
    pilots."""

    ctrl_scale_low: float = 0.95
    ctrl_scale_high: float = 1.05
    pose_noise_sigma: float = 0.002
    init_pos_sigma: float = 0.02
    init_rot_sigma: float = 0.035
    chunk_min: int = 5
    chunk_max: int = 15
    noise_low: float = -0.6
    noise_high: float = 0.6
    beta: float = 0.8
    p_on: float = 0.5

    def __post_init__(self):
        if self.ctrl_scale_low > self.ctrl_scale_high:
            raise ValueError("controller scale range is ill-ordered")
        if self.noise_low > self.noise_high:
            raise ValueError("noise bounds are ill-ordered")
        if not (0.0 <= self.p_on <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("beta and p_on must lie in [0, 1]")
        if self.chunk_min < 1 or self.chunk_min > self.chunk_max:
            raise ValueError("chunk range is ill-ordered")

    @staticmethod
    def zero() -> "DmrConfig":
        """Degenerate randomization: canonical resets, no noise."""
        return DmrConfig(
            ctrl_scale_low=1.0,
            ctrl_scale_high=1.0,
            pose_noise_sigma=0.0,
            init_pos_sigma=0.0,
            init_rot_sigma=0.0,
        )


@dataclass
class EnvState:
    """Full simulator state. The 20D observation is a view via observe_state."""

    ee: adm.AdmittanceState
    gripper: float
    held_pose: Pose
    fixed_pose: Pose
    attached: bool = False
    grasp_transform: Pose | None = None
    engaged: bool = False
    meshed: bool = False
    cum_yaw: float = 0.0
    phase_offset: float = 0.0
    step_count: int = 0
    rng_seed: int = 0
    success_latched: bool = False
    terminated: bool = False
    wrench: adm.Wrench = field(default_factory=adm.Wrench.zero)
    obs_noise_fixed: np.ndarray = field(default_factory=lambda: np.zeros(3))
    obs_noise_held: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ctrl_scales: np.ndarray = field(default_factory=lambda: np.ones(4))
    prev_gripper_cmd: float = 1.0
    engage_tip_z: float = 0.0
    engage_yaw: float = 0.0
    screw_violation: np.ndarray = field(default_factory=lambda: np.zeros(6))
    force_exceed_ticks: int = 0
    tip_in_ee: np.ndarray | None = None  # cached while attached

    def copy(self) -> "EnvState":
        return replace(
            self,
            ee=self.ee.copy(),
            held_pose=self.held_pose.copy(),
            fixed_pose=self.fixed_pose.copy(),
            grasp_transform=None if self.grasp_transform is None else self.grasp_transform.copy(),
            wrench=adm.Wrench(self.wrench.force.copy(), self.wrench.torque.copy()),
            obs_noise_fixed=self.obs_noise_fixed.copy(),
            obs_noise_held=self.obs_noise_held.copy(),
            ctrl_scales=self.ctrl_scales.copy(),
            screw_violation=self.screw_violation.copy(),
            tip_in_ee=None if self.tip_in_ee is None else self.tip_in_ee.copy(),
        )


def part_tip(pose: Pose, spec: TaskSpec) -> np.ndarray:
    """Bottom-center of the part (the contact probe point)."""
    return pose.p + quat_rotate(pose.q, np.array([0.0, 0.0, -0.5 * spec.part_length]))


def grasp_point(pose: Pose, spec: TaskSpec) -> np.ndarray:
    """Top-center of the part, where the fingertip must be to grasp."""
    return pose.p + quat_rotate(pose.q, np.array([0.0, 0.0, 0.5 * spec.part_length]))


def tilt_angle(pose: Pose) -> float:
    """Angle between the body z-axis and world vertical."""
    z_axis = quat_rotate(pose.q, np.array([0.0, 0.0, 1.0]))
    return float(np.arccos(np.clip(z_axis[2], -1.0, 1.0)))


def yaw_of(pose: Pose) -> float:
    """Heading of the body x-axis projected into the world xy-plane."""
    x_axis = quat_rotate(pose.q, np.array([1.0, 0.0, 0.0]))
    return float(np.arctan2(x_axis[1], x_axis[0]))


def wrap_angle(a: float) -> float:
    return float((a + math.pi) % (2.0 * math.pi) - math.pi)


def phase_aligned(yaw: float, spec: TaskSpec) -> bool:
    """Tooth-phase alignment test for the gear task."""
    period = 2.0 * math.pi / spec.n_teeth
    r = (yaw - 0.0) % period
    return min(r, period - r) <= spec.phase_band


def insertion_surfaces(
    spec: TaskSpec, tip: np.ndarray, floor_z: float
) -> list[tuple[float, np.ndarray]]:
    """Penetration depth and outward normal for each violated surface.

    Zones by radial distance rho from the bore axis:
      rho <= w:           free bore; floor at floor_z
      w < rho <= w+c:     45-degree chamfer funnel (below entry plane only)
      bore wall:          deep inside (below entry_z - c) pushing outward
      rho <= plate_radius plane at entry_z
      rho <= base_radius: plane at base_z
      beyond:             table plane
    """
    w = spec.clearance
    c = spec.chamfer
    rho_vec = tip[:2] - spec.axis_xy
    rho = math.hypot(rho_vec[0], rho_vec[1])
    rho_hat = rho_vec / rho if rho > 1e-12 else np.array([1.0, 0.0])
    out: list[tuple[float, np.ndarray]] = []
    z = float(tip[2])

    if rho <= w + 0.25 * c:
        if z < floor_z:
            out.append((floor_z - z, np.array([0.0, 0.0, 1.0])))
    if w < rho <= w + c:
        z_surf = spec.entry_z - c + (rho - w)
        if spec.entry_z - c <= z < z_surf:
            n = np.array([-rho_hat[0], -rho_hat[1], 1.0]) / math.sqrt(2.0)
            out.append(((z_surf - z) / math.sqrt(2.0), n))
        if floor_z - 0.002 < z < spec.entry_z - c:
            out.append((rho - w, np.array([-rho_hat[0], -rho_hat[1], 0.0])))
    if w + c < rho <= spec.plate_radius and z < spec.entry_z:
        out.append((spec.entry_z - z, np.array([0.0, 0.0, 1.0])))
    if spec.plate_radius < rho <= spec.base_radius and z < spec.base_z:
        out.append((spec.base_z - z, np.array([0.0, 0.0, 1.0])))
    if rho > spec.base_radius and z < spec.table_z:
        out.append((spec.table_z - z, np.array([0.0, 0.0, 1.0])))
    return out


def contact_force_at_tip(
    spec: TaskSpec, tip: np.ndarray, tip_velocity: np.ndarray, floor_z: float
) -> np.ndarray:
    """Analytic contact force on the part tip: spring normal + capped friction."""
    total = np.zeros(3)
    for pen, n in insertion_surfaces(spec, tip, floor_z):
        pen = min(pen, spec.penetration_cap)
        fn = spec.contact_stiffness * pen
        total += fn * n
        v_t = tip_velocity - np.dot(tip_velocity, n) * n
        v_norm = math.sqrt(v_t[0] * v_t[0] + v_t[1] * v_t[1] + v_t[2] * v_t[2])
        if v_norm > 1e-9:
            ft = min(spec.friction_viscous * v_norm, spec.mu * fn)
            total -= ft * v_t / v_norm
    return total


class AssemblyEnv:
    """One simulated assembly episode at a time; deterministic given seed."""

    def __init__(
        self,
        spec: TaskSpec,
        dmr: DmrConfig | None = None,
        reward_cfg: RewardConfig | None = None,
        admittance_params: adm.AdmittanceParams | None = None,
        control_rate: float = 15.0,
        substeps: int = 8,
        timeout_steps: int = 450,
    ):
        self.spec = spec
        self.dmr = dmr if dmr is not None else DmrConfig()
        self.reward_cfg = reward_cfg if reward_cfg is not None else RewardConfig()
        self.base_params = (
            admittance_params if admittance_params is not None else adm.AdmittanceParams()
        )
        self.control_rate = control_rate
        self.substeps = substeps
        self.timeout_steps = timeout_steps
        self.dt = 1.0 / control_rate
        self.sub_dt = self.dt / substeps
        self.state: EnvState | None = None
        self._params: adm.AdmittanceParams = self.base_params

    def reset(self, seed: int = 0) -> EnvState:
        rng = np.random.default_rng(seed)
        spec = self.spec
        dmr = self.dmr

        scales = rng.uniform(dmr.ctrl_scale_low, dmr.ctrl_scale_high, size=4)
        dp0 = rng.normal(0.0, dmr.init_pos_sigma, size=2)
        dyaw0 = rng.normal(0.0, dmr.init_rot_sigma)
        noise_fixed = rng.normal(0.0, dmr.pose_noise_sigma, size=3)
        noise_held = rng.normal(0.0, dmr.pose_noise_sigma, size=3)
        # tooth phase is part of the initial-placement randomization
        phase_offset = (
            rng.uniform(0.0, 2.0 * math.pi / spec.n_teeth)
            if dmr.init_rot_sigma > 0
            else 0.0
        )

        part_xy = spec.part_init_xy + dp0
        part_p = np.array([part_xy[0], part_xy[1], spec.table_z + 0.5 * spec.part_length])
        part_q = axis_angle_to_quat(np.array([0.0, 0.0, dyaw0]))

        fixed_p = np.array([spec.axis_xy[0], spec.axis_xy[1], spec.entry_z])
        self._params = adm.AdmittanceParams(
            M=self.base_params.M * np.array([scales[2]] * 3 + [scales[3]] * 3),
            D=self.base_params.D.copy(),
            K=self.base_params.K * np.array([scales[0]] * 3 + [scales[1]] * 3),
        )

        self.state = EnvState(
            ee=adm.AdmittanceState.at_rest(spec.robot_init),
            gripper=1.0,
            held_pose=Pose(part_p, part_q),
            fixed_pose=Pose(fixed_p, np.array([1.0, 0, 0, 0])),
            rng_seed=seed,
            obs_noise_fixed=noise_fixed,
            obs_noise_held=noise_held,
            ctrl_scales=scales,
            phase_offset=phase_offset,
        )
        return self.state

    # ------------------------------------------------------------------ #

    def _floor_z(self, st: EnvState) -> float:
        spec = self.spec
        if spec.kind == "peg":
            return spec.bore_floor_z
        if spec.kind == "gear":
            seat = spec.base_z
            if st.meshed:
                return seat
            yaw = yaw_of(st.held_pose) - st.phase_offset
            return seat if phase_aligned(yaw, spec) else seat + spec.tooth_height
        # nut: free descent limited to the engagement pocket
        return spec.entry_z - spec.engage_depth

    def _contact_wrench(self, st: EnvState, floor_z: float) -> adm.Wrench:
        spec = self.spec
        ee = st.ee
        force = np.zeros(3)
        torque = np.zeros(3)

        if st.attached and not st.engaged:
            r = quat_rotate(ee.pose.q, st.tip_in_ee)
            tip = ee.pose.p + r
            v_tip = ee.xi_dot[:3] + cross3(ee.xi_dot[3:], r)
            f = contact_force_at_tip(spec, tip, v_tip, floor_z)
            force += f
            torque += cross3(r, f)
            if not spec.gravity_tared:
                part = ee.pose.compose(st.grasp_transform)
                com = part.p + quat_rotate(part.q, spec.part_com)
                fg = np.array([0.0, 0.0, -9.81 * spec.part_mass])
                force += fg
                torque += cross3(com - ee.pose.p, fg)

        # bare fingertip against the table plane
        z = float(ee.pose.p[2])
        if z < spec.table_z:
            pen = min(spec.table_z - z, spec.penetration_cap)
            fn = spec.contact_stiffness * pen
            force += np.array([0.0, 0.0, fn])
            v_t = ee.xi_dot[:3] * np.array([1.0, 1.0, 0.0])
            v_norm = float(np.linalg.norm(v_t))
            if v_norm > 1e-9:
                ft = min(spec.friction_viscous * v_norm, spec.mu * fn)
                force -= ft * v_t / v_norm
        return adm.Wrench(force, torque)

    def step(
        self,
        action: BaseAction,
        residual: ResidualAction | None = None,
        prev_residual: ResidualAction | None = None,
    ) -> tuple[EnvState, float, list[str]]:
        """Advance one control period under the (composed) commanded action."""
        st = self.state
        if st is None:
            raise RuntimeError("call reset() before step()")
        if st.terminated:
            raise RuntimeError("episode is terminated; call reset()")
        spec = self.spec
        events: list[str] = []

        # gripper: instant actuation, edge-triggered capture, level-release
        u = float(np.clip(action.gripper, -1.0, 1.0))
        closing_edge = st.prev_gripper_cmd > GRIP_CLOSE_THRESHOLD >= u
        if st.attached and u >= GRIP_OPEN_THRESHOLD:
            st.attached = False
            st.grasp_transform = None
            st.engaged = False
            # part settles straight down onto the table
            p = st.held_pose.p.copy()
            p[2] = spec.table_z + 0.5 * spec.part_length
            st.held_pose = Pose(p, st.held_pose.q)
            if not st.success_latched:
                events.append("drop")
        elif not st.attached and closing_edge:
            gp = grasp_point(st.held_pose, spec)
            if np.linalg.norm(st.ee.pose.p - gp) < spec.capture_radius:
                st.attached = True
                st.grasp_transform = st.ee.pose.inverse().compose(st.held_pose)
                gt = st.grasp_transform
                st.tip_in_ee = gt.p + quat_rotate(
                    gt.q, np.array([0.0, 0.0, -0.5 * spec.part_length])
                )
        st.gripper = u
        st.prev_gripper_cmd = u

        max_force = 0.0
        ref = action.pose
        floor_z = self._floor_z(st) if st.attached else 0.0
        for _ in range(self.substeps):
            # when the screw joint is engaged the constraint is kinematic:
            # integrate unforced, project, and report the reaction separately
            wrench = (
                adm.Wrench.zero() if st.engaged else self._contact_wrench(st, floor_z)
            )
            st.ee = adm.step(st.ee, self._params, wrench, ref, self.sub_dt)
            if st.engaged:
                self._apply_screw(st)
                st.held_pose = st.ee.pose.compose(st.grasp_transform)
                wrench = self._screw_wrench(st, ref)
            st.wrench = wrench
            max_force = max(max_force, wrench.magnitude())
        if st.attached:
            st.held_pose = st.ee.pose.compose(st.grasp_transform)

        if st.attached and spec.kind == "nut" and not st.engaged:
            self._try_engage(st)
        if st.attached and spec.kind == "gear" and not st.meshed:
            tip = part_tip(st.held_pose, spec)
            rho = np.linalg.norm(tip[:2] - spec.axis_xy)
            # below half tooth height is only reachable with aligned phase
            if rho <= spec.clearance and tip[2] < spec.base_z + 0.5 * spec.tooth_height:
                st.meshed = True

        # events
        if st.attached and not st.success_latched and self._success_now(st):
            st.success_latched = True
            events.append("success")
        # sustained excess (not a single impact spike) trips the safety stop
        if max_force > spec.force_limit:
            st.force_exceed_ticks += 1
        else:
            st.force_exceed_ticks = 0
        if st.force_exceed_ticks >= 3:
            events.append("force_violation")
        if st.attached and np.linalg.norm(st.wrench.force[:2]) > spec.slip_bound:
            st.attached = False
            st.grasp_transform = None
            st.engaged = False
            p = st.held_pose.p.copy()
            p[2] = spec.table_z + 0.5 * spec.part_length
            st.held_pose = Pose(p, st.held_pose.q)
            if not st.success_latched:
                events.append("drop")

        st.step_count += 1
        if (
            st.step_count >= self.timeout_steps
            and "success" not in events
            and not st.success_latched
        ):
            events.append("timeout")

        if events:
            st.terminated = True

        reward = compute_reward(
            st,
            prev_residual if prev_residual is not None else ResidualAction.zero(),
            residual if residual is not None else ResidualAction.zero(),
            events,
            self.reward_cfg,
            self.spec,
        )
        return st, reward, events

    # ------------------------------------------------------------------ #

    def _success_now(self, st: EnvState) -> bool:
        spec = self.spec
        if spec.kind == "nut":
            return st.engaged and st.cum_yaw >= spec.yaw_target
        err = np.linalg.norm(st.held_pose.p - spec.success_pose.p)
        return bool(err < spec.success_tol)

    def _try_engage(self, st: EnvState) -> None:
        spec = self.spec
        tip = part_tip(st.held_pose, spec)
        rho = np.linalg.norm(tip[:2] - spec.axis_xy)
        pocket_z = spec.entry_z - spec.engage_depth
        if (
            rho < spec.engage_radial_tol
            and abs(tip[2] - pocket_z) < 0.001
            and tilt_angle(st.held_pose) < spec.engage_tilt_tol
        ):
            st.engaged = True
            st.cum_yaw = 0.0
            st.engage_tip_z = pocket_z
            st.engage_yaw = yaw_of(st.held_pose)
            # settle onto the thread: keep yaw rate, shed approach momentum
            st.ee.xi_dot = np.array([0.0, 0.0, 0.0, 0.0, 0.0, st.ee.xi_dot[5]])
            self._apply_screw(st)
            st.held_pose = st.ee.pose.compose(st.grasp_transform)
            st.screw_violation = np.zeros(6)

    def _screw_wrench(self, st: EnvState, ref: Pose) -> adm.Wrench:
        """Felt reaction of the screw constraint: the spring effort the
        controller exerts against the blocked axes (yaw stays free)."""
        e = adm.pose_error(st.ee.pose, ref)
        k = self._params.K
        force = k[:3] * e[:3]
        torque = np.array([k[3] * e[3], k[4] * e[4], 0.0])
        n = np.linalg.norm(force)
        cap = self.spec.contact_stiffness * self.spec.penetration_cap
        if n > cap:
            force = force * (cap / n)
        return adm.Wrench(force, torque)

    def _apply_screw(self, st: EnvState) -> None:
        """Kinematically project the EE pose onto the screw manifold.

        Axial advance is exactly screw_pitch * delta-yaw per substep; radial
        position and tilt are slaved to the bolt axis.
        """
        spec = self.spec
        part_candidate = st.ee.pose.compose(st.grasp_transform)
        yaw_c = yaw_of(part_candidate)
        d_yaw = wrap_angle(yaw_c - st.engage_yaw - st.cum_yaw)
        new_cum = st.cum_yaw + d_yaw

        if new_cum < 0.0:
            new_cum = 0.0
            tip_c = part_tip(part_candidate, spec)
            if tip_c[2] > st.engage_tip_z + 0.002:
                st.engaged = False
                st.cum_yaw = 0.0
                return

        tip_z = st.engage_tip_z - spec.screw_pitch * new_cum
        yaw_proj = st.engage_yaw + new_cum
        part_q = axis_angle_to_quat(np.array([0.0, 0.0, yaw_proj]))
        part_p = np.array(
            [spec.axis_xy[0], spec.axis_xy[1], tip_z + 0.5 * spec.part_length]
        )
        part_proj = Pose(part_p, part_q)

        viol_p = part_candidate.p - part_proj.p
        viol_r = adm.pose_error(part_candidate, part_proj)[3:]
        st.screw_violation = np.concatenate([viol_p, viol_r])

        ee_pose = part_proj.compose(st.grasp_transform.inverse())
        wz = st.ee.xi_dot[5]
        st.ee = adm.AdmittanceState(
            pose=ee_pose,
            xi_dot=np.array([0.0, 0.0, -spec.screw_pitch * wz, 0.0, 0.0, wz]),
        )
        st.cum_yaw = new_cum


def compute_reward(
    state: EnvState,
    prev_res: ResidualAction,
    res: ResidualAction,
    events: list[str],
    cfg: RewardConfig,
    spec: TaskSpec,
) -> float:
    """Weighted sum of the shared reward terms plus the sparse success term."""
    r = 0.0
    r -= cfg.regularization * res.norm()
    r -= cfg.tilt * tilt_angle(state.ee.pose)
    f = min(state.wrench.magnitude(), cfg.force_clip)
    r -= cfg.force * (f / cfg.force_clip)
    align = np.linalg.norm(state.held_pose.p[:2] - spec.success_pose.p[:2])
    if align < cfg.align_radius:
        r += cfg.axis_align
    r -= cfg.smoothness * float(
        np.linalg.norm(prev_res.to_vector() - res.to_vector())
    )
    if any(e in events for e in ("drop", "force_violation", "timeout")):
        r -= cfg.termination
    if "success" in events:
        r += cfg.success
    return float(r)


def progression(state: EnvState, spec: TaskSpec) -> float:
    """Task progression 1 - e/e_max with e clipped to [0, e_max]."""
    if state.success_latched:
        return 1.0
    if spec.kind == "nut":
        remaining = spec.yaw_target - state.cum_yaw if state.engaged else spec.yaw_target
        e = float(np.clip(remaining, 0.0, spec.e_max))
    else:
        e = float(
            np.clip(np.linalg.norm(state.held_pose.p - spec.success_pose.p), 0.0, spec.e_max)
        )
    return 1.0 - e / spec.e_max


def observe_state(state: EnvState) -> np.ndarray:
    """20D simulator state: proprioception + object-relative positions.

    Layout: fingertip position (3), fingertip quaternion (4), gripper (1),
    position relative to fixed object (3), position relative to held object
    (3), linear velocity (3), angular velocity (3). Object positions carry
    the per-episode observation-noise offsets.
    """
    ee = state.ee
    p_fix = state.fixed_pose.p + state.obs_noise_fixed
    p_held = state.held_pose.p + state.obs_noise_held
    return np.concatenate(
        [
            ee.pose.p,
            ee.pose.q,
            [state.gripper],
            ee.pose.p - p_fix,
            ee.pose.p - p_held,
            ee.xi_dot[:3],
            ee.xi_dot[3:],
        ]
    )


def observe_copilot(
    state: EnvState, base: BaseAction, prev_res: ResidualAction
) -> np.ndarray:
    """35D copilot observation: 20D state + base action (8) + prev residual (7)."""
    return np.concatenate([observe_state(state), base.to_vector(), prev_res.to_vector()])


def unpack_state(vec: np.ndarray) -> dict:
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (STATE_DIM,):
        raise ValueError(f"state vector must have shape ({STATE_DIM},)")
    return {
        "p": vec[0:3],
        "q": vec[3:7],
        "gripper": float(vec[7]),
        "rel_fixed": vec[8:11],
        "rel_held": vec[11:14],
        "v_lin": vec[14:17],
        "v_ang": vec[17:20],
    }


def unpack_obs(vec: np.ndarray) -> dict:
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (OBS_DIM,):
        raise ValueError(f"observation vector must have shape ({OBS_DIM},)")
    d = unpack_state(vec[:STATE_DIM])
    d["base_action"] = vec[STATE_DIM : STATE_DIM + 8]
    d["prev_residual"] = vec[STATE_DIM + 8 : OBS_DIM]
    return d
