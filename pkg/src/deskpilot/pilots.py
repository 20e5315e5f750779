"""Pilot models and the demonstration dataset they share.

Pilots map the environment state to an 8D base action at 15 Hz:

  - KnnPilot:      non-parametric surrogate retrieving demonstrated commands
                   by a weighted action distance, with action chunking and
                   smooth gated perturbations.
  - ScriptedPilot: waypoint state machine that solves each task; with a noise
                   profile it stands in for imperfect human operators.
  - LaggyPilot / NoisyPilot: perturbation wrappers around any pilot.
  - BcPilot:       feedforward regressor from the 20D state to the action.

The demo file is line-delimited JSON: one header line (format version, task
kind, control rate, collector, per-episode seeds, optional checkpoint path),
then one record per step with fields (episode, t, state[20], action[8],
assisted). CPython's float repr makes the round trip bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .se3 import (
    BaseAction,
    Pose,
    ResidualAction,
    ResidualScale,
    compose_residual,
    quat_geodesic,
)
from .tasks import EnvState, TaskSpec, grasp_point, observe_state

DEMO_FORMAT = "deskpilot-demo-v1"


# --------------------------------------------------------------------------- #
# demonstration dataset
# --------------------------------------------------------------------------- #


@dataclass
class DemoEpisode:
    episode_id: int
    seed: int
    states: np.ndarray  # (N, 20)
    actions: np.ndarray  # (N, 8)
    assisted: np.ndarray  # (N,) bool
    t: np.ndarray  # (N,) int step indices

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        self.assisted = np.asarray(self.assisted, dtype=bool)
        self.t = np.asarray(self.t, dtype=int)
        n = len(self.t)
        if not (self.states.shape == (n, 20) and self.actions.shape == (n, 8)):
            raise ValueError("episode arrays have inconsistent shapes")
        if n > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class DemoDataset:
    episodes: list[DemoEpisode]
    task_kind: str = "peg"
    rate_hz: float = 15.0
    collector: str = "scripted"
    checkpoint: str | None = None

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def num_records(self) -> int:
        return sum(len(e) for e in self.episodes)

    def timestamps(self, episode: DemoEpisode) -> np.ndarray:
        return episode.t / self.rate_hz

    def save(self, path: str | Path) -> None:
        path = Path(path)
        header = {
            "format": DEMO_FORMAT,
            "task": self.task_kind,
            "rate_hz": self.rate_hz,
            "collector": self.collector,
            "episode_seeds": {str(e.episode_id): int(e.seed) for e in self.episodes},
            "checkpoint": self.checkpoint,
        }
        with path.open("w") as f:
            f.write(json.dumps(header) + "\n")
            for e in self.episodes:
                for i in range(len(e)):
                    rec = {
                        "episode": e.episode_id,
                        "t": int(e.t[i]),
                        "state": e.states[i].tolist(),
                        "action": e.actions[i].tolist(),
                        "assisted": bool(e.assisted[i]),
                    }
                    f.write(json.dumps(rec) + "\n")

    @staticmethod
    def load(path: str | Path) -> "DemoDataset":
        path = Path(path)
        with path.open() as f:
            header = json.loads(f.readline())
            if header.get("format") != DEMO_FORMAT:
                raise ValueError(f"unsupported demo format: {header.get('format')!r}")
            seeds = {int(k): v for k, v in header.get("episode_seeds", {}).items()}
            buf: dict[int, list[dict]] = {}
            for line in f:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                buf.setdefault(rec["episode"], []).append(rec)
        episodes = []
        for ep_id in sorted(buf):
            recs = buf[ep_id]
            episodes.append(
                DemoEpisode(
                    episode_id=ep_id,
                    seed=seeds.get(ep_id, 0),
                    states=np.array([r["state"] for r in recs]),
                    actions=np.array([r["action"] for r in recs]),
                    assisted=np.array([r["assisted"] for r in recs]),
                    t=np.array([r["t"] for r in recs]),
                )
            )
        return DemoDataset(
            episodes=episodes,
            task_kind=header["task"],
            rate_hz=header["rate_hz"],
            collector=header.get("collector", "unknown"),
            checkpoint=header.get("checkpoint"),
        )


def episode_success(episode: DemoEpisode, spec: TaskSpec) -> bool:
    """Recompute success from recorded states via task geometry.

    The record format carries no outcome flag, so this re-derives it: for
    peg/gear, the held part reached its success pose; for nut, the recorded
    yaw history accumulates at least the target rotation after the part
    reached the engagement region. Recorded object positions carry the
    per-episode observation-noise offset, so this is a screening heuristic;
    exact outcomes come from replaying the episode (harness.episode_events).
    """
    p_ee = episode.states[:, 0:3]
    rel_held = episode.states[:, 11:14]
    p_held = p_ee - rel_held
    if spec.kind in ("peg", "gear"):
        # recorded object positions carry the per-episode observation-noise
        # offset, so allow one extra tolerance of margin
        err = np.linalg.norm(p_held - spec.success_pose.p, axis=1)
        return bool(np.any(err < 2.0 * spec.success_tol))
    # nut: integrate yaw deltas while the part stays near the bolt axis
    from .tasks import yaw_of  # local import to avoid cycle at module load

    near = np.linalg.norm(p_held[:, :2] - spec.axis_xy, axis=1) < 2 * spec.hole_radius
    yaws = []
    for i in range(len(episode)):
        q = episode.states[i, 3:7]
        yaws.append(yaw_of(Pose(np.zeros(3), q)))
    yaws = np.unwrap(np.asarray(yaws))
    cum = 0.0
    for i in range(1, len(yaws)):
        if near[i] and near[i - 1]:
            cum = max(0.0, cum + (yaws[i] - yaws[i - 1]))
    return cum >= spec.yaw_target


# --------------------------------------------------------------------------- #
# action distance and weight fitting
# --------------------------------------------------------------------------- #


def action_distance(
    a: BaseAction, b: BaseAction, w: tuple[float, float, float] = (1.0, 1.0, 1.0)
) -> float:
    """Weighted command distance: translation + rotation geodesic + gripper."""
    return (
        w[0] * float(np.linalg.norm(a.pose.p - b.pose.p))
        + w[1] * quat_geodesic(a.pose.q, b.pose.q)
        + w[2] * abs(a.gripper - b.gripper)
    )


def action_distances_to(
    query: BaseAction,
    p: np.ndarray,
    q: np.ndarray,
    u: np.ndarray,
    w: tuple[float, float, float],
) -> np.ndarray:
    """Vectorized distance from one query to (N,) stored commands."""
    dp = np.linalg.norm(p - query.pose.p, axis=1)
    # sign-minimized chord, then geodesic angle; agrees with quat_geodesic
    chord = np.minimum(
        np.linalg.norm(q - query.pose.q, axis=1),
        np.linalg.norm(q + query.pose.q, axis=1),
    )
    drot = 4.0 * np.arcsin(np.clip(0.5 * chord, 0.0, 1.0))
    du = np.abs(u - query.gripper)
    return w[0] * dp + w[1] * drot + w[2] * du


DEFAULT_WEIGHT_GRID = (0.1, 0.3, 1.0, 3.0, 10.0)


def fit_weights(
    data: DemoDataset,
    grid: tuple[float, ...] = DEFAULT_WEIGHT_GRID,
    max_queries: int = 1000,
    seed: int = 0,
) -> tuple[float, float, float]:
    """Grid-search distance weights by leave-one-episode-out prediction error.

    For each held-out record, the retrieved nearest command from the other
    episodes is the prediction; the error sums position, rotation, and gripper
    RMSE with equal weight. Ties break toward the lexicographically smaller
    weight triple.
    """
    if len(data.episodes) < 2:
        raise ValueError("fit_weights needs at least two episodes")

    p_all = np.concatenate([e.actions[:, 0:3] for e in data.episodes])
    q_all = np.concatenate([e.actions[:, 3:7] for e in data.episodes])
    u_all = np.concatenate([e.actions[:, 7] for e in data.episodes])
    ep_of = np.concatenate(
        [np.full(len(e), i) for i, e in enumerate(data.episodes)]
    )
    n = len(ep_of)

    rng = np.random.default_rng(seed)
    queries = []
    for i, e in enumerate(data.episodes):
        for j in range(len(e)):
            queries.append((i, j))
    if len(queries) > max_queries:
        idx = rng.choice(len(queries), size=max_queries, replace=False)
        queries = [queries[k] for k in sorted(idx)]

    # precompute per-component distance matrices (queries x stored commands)
    qp = np.array([data.episodes[i].states[j, 0:3] for i, j in queries])
    qq = np.array([data.episodes[i].states[j, 3:7] for i, j in queries])
    qu = np.array([data.episodes[i].states[j, 7] for i, j in queries])
    d_pos = np.linalg.norm(qp[:, None, :] - p_all[None, :, :], axis=2)
    chord = np.minimum(
        np.linalg.norm(qq[:, None, :] - q_all[None, :, :], axis=2),
        np.linalg.norm(qq[:, None, :] + q_all[None, :, :], axis=2),
    )
    d_rot = 4.0 * np.arcsin(np.clip(0.5 * chord, 0.0, 1.0))
    d_grip = np.abs(qu[:, None] - u_all[None, :])

    # mask out the held-out episode's own records
    q_ep = np.array([i for i, _ in queries])
    mask = q_ep[:, None] == ep_of[None, :]

    targets = np.array(
        [data.episodes[i].actions[j] for i, j in queries]
    )

    best: tuple[float, float, float] | None = None
    best_err = np.inf
    for a1 in grid:
        for a2 in grid:
            for a3 in grid:
                d = a1 * d_pos + a2 * d_rot + a3 * d_grip
                d = np.where(mask, np.inf, d)
                nn = np.argmin(d, axis=1)
                pred_p = p_all[nn]
                pred_q = q_all[nn]
                pred_u = u_all[nn]
                pos_rmse = float(
                    np.sqrt(np.mean(np.sum((pred_p - targets[:, 0:3]) ** 2, axis=1)))
                )
                chord_t = np.minimum(
                    np.linalg.norm(pred_q - targets[:, 3:7], axis=1),
                    np.linalg.norm(pred_q + targets[:, 3:7], axis=1),
                )
                rot_err = 4.0 * np.arcsin(np.clip(0.5 * chord_t, 0.0, 1.0))
                rot_rmse = float(np.sqrt(np.mean(rot_err**2)))
                grip_rmse = float(np.sqrt(np.mean((pred_u - targets[:, 7]) ** 2)))
                err = pos_rmse + rot_rmse + grip_rmse
                if err < best_err - 1e-15:
                    best_err = err
                    best = (a1, a2, a3)
    assert best is not None
    return best


# --------------------------------------------------------------------------- #
# gated noise
# --------------------------------------------------------------------------- #


@dataclass
class GateNoiseConfig:
    beta: float = 0.8
    p_on: float = 0.5
    low: float = -0.6
    high: float = 0.6
    scale: ResidualScale = field(default_factory=ResidualScale)

    def __post_init__(self):
        if self.low > self.high:
            raise ValueError("noise bounds are ill-ordered")
        if not (0.0 <= self.p_on <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("beta and p_on must lie in [0, 1]")


@dataclass
class GateState:
    """Exponential moving average of a Bernoulli activation signal."""

    m: float = 0.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        if not 0.0 <= self.m <= 1.0:
            raise ValueError("gate level must start in [0, 1]")


def gated_noise(gate: GateState, cfg: GateNoiseConfig) -> ResidualAction:
    """Advance the gate and return the smooth perturbation m * eps (7D)."""
    b = 1.0 if gate.rng.random() < cfg.p_on else 0.0
    gate.m = cfg.beta * gate.m + (1.0 - cfg.beta) * b
    eps = gate.rng.uniform(cfg.low, cfg.high, size=7)
    return ResidualAction.from_vector(gate.m * eps)


# --------------------------------------------------------------------------- #
# kNN pilot
# --------------------------------------------------------------------------- #


@dataclass
class KnnConfig:
    k: int = 5
    temperature: float = 0.05
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    chunk_min: int = 5
    chunk_max: int = 15
    noise: GateNoiseConfig = field(default_factory=GateNoiseConfig)
    noise_enabled: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not any(w > 0 for w in self.weights):
            raise ValueError("at least one distance weight must be positive")
        if self.chunk_min < 1 or self.chunk_min > self.chunk_max:
            raise ValueError("chunk range is ill-ordered")


def proprio_embedding(state: EnvState) -> BaseAction:
    """Embed the current fingertip pose + opening as a point in command space."""
    return BaseAction(state.ee.pose.copy(), state.gripper)


class KnnPilot:
    """Retrieves demonstrated commands near the current proprioceptive pose.

    Emits short chunks of consecutive stored commands; chunks run to
    completion and a new retrieval happens only on exhaustion. Every emitted
    command is a verbatim copy of a stored one (before optional noise).
    """

    def __init__(self, data: DemoDataset, cfg: KnnConfig | None = None, seed: int = 0):
        if data.num_records == 0:
            raise ValueError("kNN pilot needs a non-empty dataset")
        self.data = data
        self.cfg = cfg if cfg is not None else KnnConfig()
        if self.cfg.k > data.num_records:
            raise ValueError("k exceeds dataset size")
        self._p = np.concatenate([e.actions[:, 0:3] for e in data.episodes])
        self._q = np.concatenate([e.actions[:, 3:7] for e in data.episodes])
        self._u = np.concatenate([e.actions[:, 7] for e in data.episodes])
        self._ep = np.concatenate(
            [np.full(len(e), i) for i, e in enumerate(data.episodes)]
        )
        self._idx = np.concatenate([np.arange(len(e)) for e in data.episodes])
        self.reset(seed)

    def reset(self, seed: int = 0) -> None:
        self.rng = np.random.default_rng(seed)
        self.gate = GateState(m=0.0, rng=self.rng)
        self._chunk: list[np.ndarray] = []

    def knn_step(self, query: BaseAction) -> BaseAction:
        """Next command: continue the open chunk or retrieve a new one."""
        if not self._chunk:
            d = action_distances_to(query, self._p, self._q, self._u, self.cfg.weights)
            k = min(self.cfg.k, len(d))
            nearest = np.argpartition(d, k - 1)[:k]
            nearest = nearest[np.argsort(d[nearest], kind="stable")]
            logits = -d[nearest] / self.cfg.temperature
            logits -= logits.max()
            probs = np.exp(logits)
            probs /= probs.sum()
            choice = nearest[self.rng.choice(k, p=probs)]
            ep = self.data.episodes[self._ep[choice]]
            start = self._idx[choice]
            length = int(self.rng.integers(self.cfg.chunk_min, self.cfg.chunk_max + 1))
            stop = min(start + length, len(ep))
            self._chunk = [ep.actions[i].copy() for i in range(start, stop)]
        vec = self._chunk.pop(0)
        return BaseAction.from_vector(vec)

    def step(self, state: EnvState) -> BaseAction:
        a = self.knn_step(proprio_embedding(state))
        if self.cfg.noise_enabled:
            delta = gated_noise(self.gate, self.cfg.noise)
            a = compose_residual(a, delta, self.cfg.noise.scale)
        return a


# --------------------------------------------------------------------------- #
# perturbation wrappers
# --------------------------------------------------------------------------- #


class LaggyPilot:
    """Re-emits the previous action with probability p_repeat."""

    def __init__(self, inner, p_repeat: float = 0.8, seed: int = 0):
        if not 0.0 <= p_repeat <= 1.0:
            raise ValueError("p_repeat must lie in [0, 1]")
        self.inner = inner
        self.p_repeat = p_repeat
        self.reset(seed)

    def reset(self, seed: int = 0) -> None:
        self.rng = np.random.default_rng(seed)
        self._prev: BaseAction | None = None
        self.inner.reset(seed + 1)

    def step(self, state: EnvState) -> BaseAction:
        if self._prev is not None and self.rng.random() < self.p_repeat:
            return self._prev.copy()
        a = self.inner.step(state)
        self._prev = a.copy()
        return a


class NoisyPilot:
    """Composes smooth gated noise onto the inner pilot's output."""

    def __init__(self, inner, cfg: GateNoiseConfig | None = None, seed: int = 0):
        self.inner = inner
        self.cfg = cfg if cfg is not None else GateNoiseConfig()
        self.reset(seed)

    def reset(self, seed: int = 0) -> None:
        self.rng = np.random.default_rng(seed)
        self.gate = GateState(m=0.0, rng=self.rng)
        self.inner.reset(seed + 1)

    def step(self, state: EnvState) -> BaseAction:
        a = self.inner.step(state)
        delta = gated_noise(self.gate, self.cfg)
        return compose_residual(a, delta, self.cfg.scale)


def wrap_laggy(pilot, p_repeat: float = 0.8, seed: int = 0) -> LaggyPilot:
    return LaggyPilot(pilot, p_repeat, seed)


def wrap_noisy(pilot, cfg: GateNoiseConfig | None = None, seed: int = 0) -> NoisyPilot:
    return NoisyPilot(pilot, cfg, seed)


# --------------------------------------------------------------------------- #
# scripted pilot
# --------------------------------------------------------------------------- #


@dataclass
class ScriptedNoiseProfile:
    """Execution noise for the scripted pilot.

    aim_sigma is a per-episode constant aiming bias applied to perceived
    object positions (systematic operator error); the gate noise adds smooth
    per-step perturbation bursts.
    """

    aim_sigma: float = 0.0
    retry_jitter: float = 0.001
    gate: GateNoiseConfig | None = None

    @staticmethod
    def none() -> "ScriptedNoiseProfile":
        return ScriptedNoiseProfile()


class ScriptedPilot:
    """Waypoint state machine that completes each task deterministically.

    Phases: approach -> descend -> grasp -> lift -> transport -> align ->
    insert (with per-task endgame) -> hold. Targets are streamed with a
    bounded per-tick rate, the way a human teleoperator moves.
    """

    SAFE_Z = 0.10
    RATE = 0.012
    INSERT_RATE = 0.004
    GRASP_WAIT = 3
    STUCK_TICKS = 22  # a human proceeds rather than waiting forever

    def __init__(
        self,
        spec: TaskSpec,
        noise: ScriptedNoiseProfile | None = None,
        seed: int = 0,
    ):
        self.spec = spec
        self.noise = noise if noise is not None else ScriptedNoiseProfile.none()
        self.reset(seed)

    def reset(self, seed: int = 0) -> None:
        self.rng = np.random.default_rng(seed)
        self.phase = "approach"
        self.cursor: np.ndarray | None = None
        self.yaw_cmd = 0.0
        self.grip_cmd = 1.0
        self.wait = 0
        self.phase_ticks = 0
        self.engage_yaw0: float | None = None
        self.engage_z0: float | None = None
        self.bias_held = (
            self.rng.normal(0.0, self.noise.aim_sigma, size=2)
            if self.noise.aim_sigma > 0
            else np.zeros(2)
        )
        self.bias_fixed = (
            self.rng.normal(0.0, self.noise.aim_sigma, size=2)
            if self.noise.aim_sigma > 0
            else np.zeros(2)
        )
        self.jitter = np.zeros(2)
        if self.noise.gate is not None:
            self.gate = GateState(m=0.0, rng=self.rng)
        else:
            self.gate = None

    # -- helpers -------------------------------------------------------- #

    def _move_cursor(self, target: np.ndarray, rate: float) -> np.ndarray:
        d = target - self.cursor
        n = float(np.linalg.norm(d))
        self.cursor = target.copy() if n <= rate else self.cursor + d / n * rate
        return self.cursor

    def _reached(self, state: EnvState, target: np.ndarray, tol: float = 0.005) -> bool:
        # proceed when roughly there, or when tired of waiting: assistance
        # wobble must not stall the sequence
        if self.phase_ticks > self.STUCK_TICKS:
            return True
        at_cursor = np.linalg.norm(self.cursor - target) < 1e-9
        close = np.linalg.norm(state.ee.pose.p - target) < tol
        return at_cursor and close

    def _enter(self, phase: str) -> None:
        self.phase = phase
        self.phase_ticks = 0

    def _emit(self, rate: float) -> BaseAction:
        from .se3 import axis_angle_to_quat

        q = axis_angle_to_quat(np.array([0.0, 0.0, self.yaw_cmd]))
        a = BaseAction(Pose(self.cursor.copy(), q), self.grip_cmd)
        if self.gate is not None:
            delta = gated_noise(self.gate, self.noise.gate)
            a = compose_residual(a, delta, self.noise.gate.scale)
        return a

    # -- control law ---------------------------------------------------- #

    def step(self, state: EnvState) -> BaseAction:
        spec = self.spec
        if self.cursor is None:
            self.cursor = state.ee.pose.p.copy()
        ax = np.array([spec.axis_xy[0], spec.axis_xy[1]]) + self.bias_fixed
        gp = grasp_point(state.held_pose, spec)
        gp_seen = gp.copy()
        gp_seen[:2] += self.bias_held + self.jitter

        self.phase_ticks += 1
        if self.phase == "approach":
            self.grip_cmd = 1.0
            target = np.array([gp_seen[0], gp_seen[1], self.SAFE_Z])
            self._move_cursor(target, self.RATE)
            if self._reached(state, target):
                self._enter("descend")
        elif self.phase == "descend":
            target = gp_seen
            self._move_cursor(target, self.RATE)
            if self._reached(state, target, tol=0.003):
                self._enter("grasp")
                self.wait = 0
        elif self.phase == "grasp":
            self.grip_cmd = -1.0
            self.wait += 1
            if state.attached:
                self._enter("lift")
            elif self.wait > self.GRASP_WAIT:
                # missed: reopen and try again with a small aim adjustment
                self.grip_cmd = 1.0
                self.jitter = self.rng.normal(0.0, self.noise.retry_jitter, size=2)
                self._enter("approach")
        elif self.phase == "lift":
            target = np.array([self.cursor[0], self.cursor[1], self.SAFE_Z])
            self._move_cursor(target, self.RATE)
            if self._reached(state, target, tol=0.008):
                self._enter("transport")
        elif self.phase == "transport":
            target = np.array([ax[0], ax[1], self.SAFE_Z])
            self._move_cursor(target, self.RATE)
            if self._reached(state, target):
                self._enter("align")
        elif self.phase == "align":
            hover = spec.entry_z + spec.part_length + 0.005
            target = np.array([ax[0], ax[1], hover])
            self._move_cursor(target, self.RATE)
            if self._reached(state, target):
                self._enter("insert")
        elif self.phase == "insert":
            self._insert_endgame(state, ax)
        # "hold": keep the last command

        return self._emit(self.RATE)

    def _insert_endgame(self, state: EnvState, ax: np.ndarray) -> None:
        spec = self.spec
        if spec.kind == "peg":
            depth_z = spec.bore_floor_z + spec.part_length - 0.0005
            self._move_cursor(np.array([ax[0], ax[1], depth_z]), self.INSERT_RATE)
        elif spec.kind == "gear":
            seat_z = spec.base_z + spec.part_length - 0.0005
            self._move_cursor(np.array([ax[0], ax[1], seat_z]), self.INSERT_RATE)
            tip_z = state.held_pose.p[2] - 0.5 * spec.part_length
            blocked = tip_z > spec.base_z + 0.5 * spec.tooth_height
            if state.attached and blocked and not state.meshed:
                near_floor = abs(
                    tip_z - (spec.base_z + spec.tooth_height)
                ) < 0.002
                if near_floor:
                    self.yaw_cmd += 0.012
        else:  # nut
            pocket_fingertip = spec.entry_z - spec.engage_depth + spec.part_length
            if not state.engaged:
                self._move_cursor(
                    np.array([ax[0], ax[1], pocket_fingertip]), self.INSERT_RATE
                )
                self.engage_yaw0 = None
            else:
                if self.engage_yaw0 is None:
                    self.engage_yaw0 = self.yaw_cmd
                    self.engage_z0 = self.cursor[2]
                self.yaw_cmd += 0.03
                turned = self.yaw_cmd - self.engage_yaw0
                z = self.engage_z0 - spec.screw_pitch * min(turned, spec.yaw_target)
                self._move_cursor(np.array([ax[0], ax[1], z]), self.INSERT_RATE)


# --------------------------------------------------------------------------- #
# behavioral-cloning pilot
# --------------------------------------------------------------------------- #


class MlpRegressor:
    """Small tanh MLP (or linear map for empty hidden) trained on MSE."""

    def __init__(self, in_dim: int, out_dim: int, hidden: tuple[int, ...], rng):
        self.hidden = hidden
        dims = [in_dim, *hidden, out_dim]
        self.weights = []
        self.biases = []
        for a, b in zip(dims[:-1], dims[1:]):
            self.weights.append(rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b)))
            self.biases.append(np.zeros(b))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def gradients(self, x: np.ndarray, err: np.ndarray, acts: list[np.ndarray]):
        """Backprop of mean-squared-error loss; err = (pred - target)/n."""
        gw = [np.zeros_like(w) for w in self.weights]
        gb = [np.zeros_like(b) for b in self.biases]
        delta = 2.0 * err
        for i in reversed(range(len(self.weights))):
            a_in = acts[i]
            gw[i] = a_in.T @ delta
            gb[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return gw, gb


@dataclass
class BcTrainingReport:
    losses: list[float]
    converged: bool


class BcPilot:
    """Feedforward regressor from the 20D state to the 8D action.

    Predicted positions are clamped to the demonstrated command envelope:
    off-manifold states otherwise extrapolate into runaway commands.
    """

    def __init__(self, model: MlpRegressor, x_mean, x_std, y_mean, y_std, p_low, p_high):
        self.model = model
        self.x_mean = x_mean
        self.x_std = x_std
        self.y_mean = y_mean
        self.y_std = y_std
        self.p_low = p_low
        self.p_high = p_high
        self.report: BcTrainingReport | None = None

    def reset(self, seed: int = 0) -> None:
        pass  # stateless policy

    def predict(self, state_vec: np.ndarray) -> BaseAction:
        x = (np.atleast_2d(state_vec) - self.x_mean) / self.x_std
        y, _ = self.model.forward(x)
        out = y[0] * self.y_std + self.y_mean
        out[0:3] = np.clip(out[0:3], self.p_low, self.p_high)
        return bc_output_to_action(out)

    def step(self, state: EnvState) -> BaseAction:
        return self.predict(observe_state(state))


def bc_output_to_action(y: np.ndarray) -> BaseAction:
    """Map a raw 8-vector to a valid action: renormalize the quaternion."""
    v = y.copy()
    n = np.linalg.norm(v[3:7])
    if n < 1e-8:
        v[3:7] = [1.0, 0, 0, 0]
    else:
        v[3:7] = v[3:7] / n
        if v[3] < 0:
            v[3:7] = -v[3:7]
    v[7] = np.clip(v[7], -1.0, 1.0)
    return BaseAction.from_vector(v)


def bc_step(pilot: BcPilot, state_vec: np.ndarray) -> BaseAction:
    return pilot.predict(state_vec)


def fit_bc_pilot(
    data: DemoDataset,
    hidden: tuple[int, ...] = (128,),
    epochs: int = 1500,
    lr: float = 2e-3,
    optimizer: str = "adam",
    weight_decay: float = 1e-4,
    seed: int = 0,
) -> BcPilot:
    """Least-squares training of the state->action regressor.

    optimizer="gd" runs plain full-batch gradient descent with no decay
    (monotone on a linear model with a small enough step); "adam" with a
    little weight decay is the default for the nonlinear pilot.
    """
    if data.num_records == 0:
        raise ValueError("cannot fit a BC pilot on an empty dataset")
    x = np.concatenate([e.states for e in data.episodes])
    y_raw = np.concatenate([e.actions for e in data.episodes])
    x_mean = x.mean(axis=0)
    x_std = np.maximum(x.std(axis=0), 1e-6)
    xn = (x - x_mean) / x_std
    # standardized targets keep millimeter-scale position residuals visible
    # next to quaternion and gripper components
    y_mean = y_raw.mean(axis=0)
    y_std = np.maximum(y_raw.std(axis=0), 1e-6)
    y = (y_raw - y_mean) / y_std
    p_low = y_raw[:, 0:3].min(axis=0) - 0.01
    p_high = y_raw[:, 0:3].max(axis=0) + 0.01

    rng = np.random.default_rng(seed)
    model = MlpRegressor(x.shape[1], y.shape[1], hidden, rng)
    n = len(x)

    # Adam state
    mw = [np.zeros_like(w) for w in model.weights]
    vw = [np.zeros_like(w) for w in model.weights]
    mb = [np.zeros_like(b) for b in model.biases]
    vb = [np.zeros_like(b) for b in model.biases]
    b1, b2, eps = 0.9, 0.999, 1e-8

    losses = []
    for t in range(1, epochs + 1):
        pred, acts = model.forward(xn)
        diff = pred - y
        loss = float(np.mean(diff**2))
        if not np.isfinite(loss):
            raise RuntimeError(
                f"BC training diverged at epoch {t}: loss={loss}, "
                f"last finite loss={losses[-1] if losses else 'n/a'}"
            )
        losses.append(loss)
        gw, gb = model.gradients(xn, diff / n, acts)
        if optimizer == "gd":
            for i in range(len(model.weights)):
                model.weights[i] -= lr * gw[i]
                model.biases[i] -= lr * gb[i]
        else:
            for i in range(len(model.weights)):
                gw[i] = gw[i] + weight_decay * model.weights[i]
                mw[i] = b1 * mw[i] + (1 - b1) * gw[i]
                vw[i] = b2 * vw[i] + (1 - b2) * gw[i] ** 2
                mb[i] = b1 * mb[i] + (1 - b1) * gb[i]
                vb[i] = b2 * vb[i] + (1 - b2) * gb[i] ** 2
                mw_h = mw[i] / (1 - b1**t)
                vw_h = vw[i] / (1 - b2**t)
                mb_h = mb[i] / (1 - b1**t)
                vb_h = vb[i] / (1 - b2**t)
                model.weights[i] -= lr * mw_h / (np.sqrt(vw_h) + eps)
                model.biases[i] -= lr * mb_h / (np.sqrt(vb_h) + eps)

    pilot = BcPilot(model, x_mean, x_std, y_mean, y_std, p_low, p_high)
    pilot.report = BcTrainingReport(losses=losses, converged=True)
    return pilot
