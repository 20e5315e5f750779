"""Batch evaluation: episode rollouts, demo collection/replay, the cross-pilot
robustness matrix, and the data-quality distillation comparison."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .copilot import PolicyCheckpoint, policy_sample
from .pilots import (
    BaseAction,
    DemoDataset,
    DemoEpisode,
    GateNoiseConfig,
    KnnConfig,
    KnnPilot,
    ScriptedNoiseProfile,
    ScriptedPilot,
    fit_bc_pilot,
    wrap_laggy,
    wrap_noisy,
)
from .se3 import ResidualAction, compose_residual
from .tasks import AssemblyEnv, observe_copilot, observe_state, progression

PILOT_KINDS = ("laggy", "noisy", "expert", "bc", "knn", "novice")

PILOT_SEED_STRIDE = 7919  # decouples pilot rng from the env episode seed


# --------------------------------------------------------------------------- #
# single-episode rollout
# --------------------------------------------------------------------------- #


@dataclass
class EpisodeResult:
    progression: float
    max_progression: float
    success: bool
    grasped: bool
    steps: int
    events: list[str]
    reward_sum: float
    states: np.ndarray | None = None
    actions: np.ndarray | None = None
    assisted: np.ndarray | None = None


def run_episode(
    env: AssemblyEnv,
    pilot,
    seed: int,
    copilot: PolicyCheckpoint | None = None,
    record: bool = False,
) -> EpisodeResult:
    """Roll one episode: pilot emits base actions, the copilot (if any)
    composes mean-mode residuals. Recorded actions are the pre-residual base
    actions, with a per-record assisted flag; a final hold record captures
    the terminal state (its action is the last command, never re-executed)."""
    state = env.reset(seed)
    pilot.reset(seed + PILOT_SEED_STRIDE)
    prev_res = ResidualAction.zero()
    total = 0.0
    max_prog = progression(state, env.spec)
    grasped = False
    events: list[str] = []
    states, actions, assisted = [], [], []
    while not state.terminated:
        base = pilot.step(state)
        if record:
            states.append(observe_state(state).copy())
            actions.append(base.to_vector())
            assisted.append(copilot is not None)
        if copilot is not None:
            obs = observe_copilot(state, base, prev_res)
            res, _ = policy_sample(copilot, obs, mode="mean")
            act = compose_residual(base, res, copilot.residual_scale)
        else:
            res = ResidualAction.zero()
            act = base
        state, r, events = env.step(act, residual=res, prev_residual=prev_res)
        prev_res = res
        total += r
        max_prog = max(max_prog, progression(state, env.spec))
        grasped = grasped or state.attached
    if record and actions:
        states.append(observe_state(state).copy())
        actions.append(actions[-1].copy())
        assisted.append(assisted[-1])
    return EpisodeResult(
        progression=progression(state, env.spec),
        max_progression=max_prog,
        success="success" in events,
        grasped=grasped,
        steps=state.step_count,
        events=events,
        reward_sum=total,
        states=np.array(states) if record else None,
        actions=np.array(actions) if record else None,
        assisted=np.array(assisted, dtype=bool) if record else None,
    )


def collect_demos(
    env: AssemblyEnv,
    pilot,
    episodes: int,
    seed: int,
    copilot: PolicyCheckpoint | None = None,
    collector: str = "scripted",
    checkpoint_path: str | None = None,
) -> DemoDataset:
    """Run episodes and package them as a demo dataset (base actions only)."""
    eps = []
    for k in range(episodes):
        ep_seed = seed + k
        result = run_episode(env, pilot, ep_seed, copilot=copilot, record=True)
        n = len(result.actions)
        eps.append(
            DemoEpisode(
                episode_id=k,
                seed=ep_seed,
                states=result.states,
                actions=result.actions,
                assisted=result.assisted,
                t=np.arange(n),
            )
        )
    return DemoDataset(
        episodes=eps,
        task_kind=env.spec.kind,
        rate_hz=env.control_rate,
        collector=collector,
        checkpoint=checkpoint_path,
    )


@dataclass
class ReplayReport:
    max_state_deviation: float
    events: list[list[str]]
    episodes: int

    @property
    def ok(self) -> bool:
        return self.max_state_deviation <= 1e-9


def episode_events(
    env: AssemblyEnv, episode: DemoEpisode, copilot: PolicyCheckpoint | None = None
) -> list[str]:
    """Ground-truth terminal events of one recorded episode via exact replay."""
    single = DemoDataset(episodes=[episode])
    report = replay_demo(single, env, copilot=copilot)
    return report.events[0]


def replay_demo(
    data: DemoDataset,
    env: AssemblyEnv,
    copilot: PolicyCheckpoint | None = None,
) -> ReplayReport:
    """Re-simulate recorded episodes from their seeds and verify the states.

    Assisted records need the checkpoint used at recording time (mean-mode
    residuals are deterministic, so the composed action is reproducible).
    """
    if copilot is None and data.checkpoint:
        copilot = PolicyCheckpoint.load(data.checkpoint)
    max_dev = 0.0
    all_events: list[list[str]] = []
    for ep in data.episodes:
        state = env.reset(ep.seed)
        prev_res = ResidualAction.zero()
        events: list[str] = []
        for i in range(len(ep)):
            dev = float(np.max(np.abs(observe_state(state) - ep.states[i])))
            max_dev = max(max_dev, dev)
            if i == len(ep) - 1:
                break  # final record is the terminal-state hold, never stepped
            base = BaseAction.from_vector(ep.actions[i])
            if ep.assisted[i]:
                if copilot is None:
                    raise ValueError(
                        "assisted records require the recording checkpoint"
                    )
                obs = observe_copilot(state, base, prev_res)
                res, _ = policy_sample(copilot, obs, mode="mean")
                act = compose_residual(base, res, copilot.residual_scale)
            else:
                res = ResidualAction.zero()
                act = base
            state, _, ev = env.step(act, residual=res, prev_residual=prev_res)
            prev_res = res
            events.extend(ev)
        all_events.append(events)
    return ReplayReport(max_state_deviation=max_dev, events=all_events, episodes=len(data))


# --------------------------------------------------------------------------- #
# pilot construction
# --------------------------------------------------------------------------- #


def make_pilot(
    kind: str,
    spec,
    seed: int = 0,
    demos: DemoDataset | None = None,
    knn_cfg: KnnConfig | None = None,
    novice_aim_sigma: float = 0.006,
):
    """Standard pilot zoo. 'expert' is the zero-noise scripted oracle; 'laggy'
    and 'noisy' wrap it per the baseline perturbation models; 'novice' is the
    aim-biased + gated-noise profile used for copilot training."""
    if kind == "expert":
        return ScriptedPilot(spec, seed=seed)
    if kind == "laggy":
        return wrap_laggy(ScriptedPilot(spec, seed=seed), p_repeat=0.8, seed=seed)
    if kind == "noisy":
        return wrap_noisy(
            ScriptedPilot(spec, seed=seed), GateNoiseConfig(p_on=0.5), seed=seed
        )
    if kind == "novice":
        profile = ScriptedNoiseProfile(
            aim_sigma=novice_aim_sigma, gate=GateNoiseConfig()
        )
        return ScriptedPilot(spec, noise=profile, seed=seed)
    if kind == "knn":
        if demos is None:
            raise ValueError("kNN pilot needs a demo dataset")
        return KnnPilot(demos, knn_cfg, seed=seed)
    if kind == "bc":
        if demos is None:
            raise ValueError("BC pilot needs a demo dataset")
        return fit_bc_pilot(demos, seed=seed)
    raise ValueError(f"unknown pilot kind {kind!r}; supported: {PILOT_KINDS}")


# --------------------------------------------------------------------------- #
# cross-pilot matrix
# --------------------------------------------------------------------------- #


@dataclass
class MatrixSpec:
    copilots: list[str | None]  # checkpoint paths; None is the no-copilot row
    pilots: list[str] = field(default_factory=lambda: ["laggy", "noisy", "expert", "bc", "knn"])
    tasks: list[str] = field(default_factory=lambda: ["peg"])
    episodes: int = 200
    seed: int = 0
    progression_mode: str = "final"  # or "max"

    def __post_init__(self):
        if not self.copilots or not self.pilots or not self.tasks:
            raise ValueError("matrix axes must be non-empty")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.progression_mode not in ("final", "max"):
            raise ValueError("progression_mode must be 'final' or 'max'")


@dataclass
class CellResult:
    copilot: str
    pilot: str
    task: str
    mean_progression: float
    std_progression: float
    success_rate: float
    mean_steps: float  # successes only; nan when none succeeded
    episodes: int
    raw_progressions: list[float] = field(default_factory=list)
    raw_successes: list[bool] = field(default_factory=list)
    raw_steps: list[int] = field(default_factory=list)


def cell_seed(master_seed: int, copilot: str, pilot: str, task: str) -> int:
    """Per-cell seed derived from the cell identity (order-independent)."""
    ident = f"{master_seed}|{copilot}|{pilot}|{task}".encode()
    return int.from_bytes(hashlib.sha256(ident).digest()[:8], "little") % (2**31)


def aggregate_cell(
    copilot: str, pilot: str, task: str,
    progs: list[float], succs: list[bool], steps: list[int],
) -> CellResult:
    succ_steps = [s for s, ok in zip(steps, succs) if ok]
    return CellResult(
        copilot=copilot,
        pilot=pilot,
        task=task,
        mean_progression=float(np.mean(progs)),
        std_progression=float(np.std(progs)),
        success_rate=float(np.mean(succs)),
        mean_steps=float(np.mean(succ_steps)) if succ_steps else float("nan"),
        episodes=len(progs),
        raw_progressions=[float(p) for p in progs],
        raw_successes=[bool(s) for s in succs],
        raw_steps=[int(s) for s in steps],
    )


def run_matrix(
    spec: MatrixSpec,
    env_factory,
    demos: DemoDataset | None = None,
    knn_cfg: KnnConfig | None = None,
) -> list[CellResult]:
    """Evaluate every (copilot, pilot, task) cell with disjoint seed streams.

    env_factory(task_kind) -> AssemblyEnv. Checkpoints are loaded up front so
    a missing file fails fast with the cell identity.
    """
    ckpts: dict[str, PolicyCheckpoint | None] = {}
    for ref in spec.copilots:
        name = ref if ref is not None else "none"
        if ref is None:
            ckpts[name] = None
        else:
            try:
                ckpts[name] = PolicyCheckpoint.load(ref)
            except (OSError, ValueError, KeyError) as e:
                raise FileNotFoundError(
                    f"cannot load checkpoint for matrix row {ref!r}: {e}"
                ) from e

    results = []
    for ref in spec.copilots:
        cname = ref if ref is not None else "none"
        for pilot_kind in spec.pilots:
            for task_kind in spec.tasks:
                env = env_factory(task_kind)
                base = cell_seed(spec.seed, cname, pilot_kind, task_kind)
                progs, succs, steps = [], [], []
                for k in range(spec.episodes):
                    pilot = make_pilot(
                        pilot_kind, env.spec, seed=base + k, demos=demos,
                        knn_cfg=knn_cfg,
                    )
                    r = run_episode(env, pilot, base + k, copilot=ckpts[cname])
                    progs.append(
                        r.progression if spec.progression_mode == "final"
                        else r.max_progression
                    )
                    succs.append(r.success)
                    steps.append(r.steps)
                results.append(
                    aggregate_cell(cname, pilot_kind, task_kind, progs, succs, steps)
                )
    return results


def matrix_to_csv(results: list[CellResult], path: str | Path) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["copilot", "pilot", "task", "mean", "std", "success_rate", "mean_steps", "n"]
        )
        for c in results:
            w.writerow(
                [
                    c.copilot, c.pilot, c.task,
                    repr(c.mean_progression), repr(c.std_progression),
                    repr(c.success_rate), repr(c.mean_steps), c.episodes,
                ]
            )


def matrix_to_report(results: list[CellResult], path: str | Path) -> None:
    doc = [
        {
            "copilot": c.copilot,
            "pilot": c.pilot,
            "task": c.task,
            "mean_progression": c.mean_progression,
            "std_progression": c.std_progression,
            "success_rate": c.success_rate,
            "mean_steps": c.mean_steps,
            "episodes": c.episodes,
            "raw": {
                "progressions": c.raw_progressions,
                "successes": c.raw_successes,
                "steps": c.raw_steps,
            },
        }
        for c in results
    ]
    Path(path).write_text(json.dumps(doc, indent=1))


# --------------------------------------------------------------------------- #
# distillation comparison
# --------------------------------------------------------------------------- #


@dataclass
class DistillArmReport:
    label: str
    train_episodes: int
    train_successes: int
    eval_episodes: int
    grasp_successes: int
    insert_successes: int
    mean_progression: float


@dataclass
class DistillReport:
    mode: str
    arms: list[DistillArmReport]


def _filter_for_mode(
    a: DemoDataset, b: DemoDataset, mode: str, env_factory
) -> tuple[list[DemoEpisode], list[DemoEpisode]]:
    def successes(data: DemoDataset) -> list[bool]:
        ckpt = PolicyCheckpoint.load(data.checkpoint) if data.checkpoint else None
        return [
            "success" in episode_events(env_factory(), ep, copilot=ckpt)
            for ep in data.episodes
        ]

    flags_a, flags_b = successes(a), successes(b)
    if mode == "matched_attempts":
        n = min(len(a.episodes), len(b.episodes))
        # equal attempt budget; train on the successes found within it
        sel_a = [ep for ep, ok in zip(a.episodes[:n], flags_a[:n]) if ok]
        sel_b = [ep for ep, ok in zip(b.episodes[:n], flags_b[:n]) if ok]
    elif mode == "matched_successes":
        succ_a = [ep for ep, ok in zip(a.episodes, flags_a) if ok]
        succ_b = [ep for ep, ok in zip(b.episodes, flags_b) if ok]
        n = min(len(succ_a), len(succ_b))
        sel_a = succ_a[:n]
        sel_b = succ_b[:n]
    else:
        raise ValueError("mode must be 'matched_attempts' or 'matched_successes'")
    if not sel_a or not sel_b:
        raise ValueError(f"empty filtered dataset under mode {mode!r}")
    return sel_a, sel_b


def distill_and_compare(
    assisted: DemoDataset,
    unassisted: DemoDataset,
    env_factory,
    mode: str = "matched_successes",
    eval_episodes: int = 20,
    seed: int = 0,
) -> DistillReport:
    """Train a BC regressor on each dataset under a matched budget and compare
    the distilled pilots with no copilot."""
    if len(assisted.episodes) == 0 or len(unassisted.episodes) == 0:
        raise ValueError("both datasets must be non-empty")
    sel_a, sel_b = _filter_for_mode(assisted, unassisted, mode, env_factory)

    arms = []
    for label, sel, full in (
        ("assisted", sel_a, assisted),
        ("unassisted", sel_b, unassisted),
    ):
        train_set = DemoDataset(
            episodes=sel,
            task_kind=full.task_kind,
            rate_hz=full.rate_hz,
            collector=full.collector,
        )
        pilot = fit_bc_pilot(train_set, seed=seed)
        grasp = 0
        insert = 0
        progs = []
        base = cell_seed(seed, "distill", label, full.task_kind)
        for k in range(eval_episodes):
            r = run_episode(env_factory(), pilot, base + k, copilot=None)
            insert += r.success
            progs.append(r.progression)
            grasp += r.grasped
        arms.append(
            DistillArmReport(
                label=label,
                train_episodes=len(sel),
                train_successes=len(sel),
                eval_episodes=eval_episodes,
                grasp_successes=grasp,
                insert_successes=insert,
                mean_progression=float(np.mean(progs)),
            )
        )
    return DistillReport(mode=mode, arms=arms)
