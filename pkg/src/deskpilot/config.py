"""Workbench configuration: one YAML document exposing every tunable.

Sections: task, admittance, dmr, reward, knn, ppo, residual_scale, pilots,
service. Unknown keys are rejected at every level; cross-field consistency
(e.g. e_max units matching the task kind) is validated at load.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .admittance import AdmittanceParams
from .copilot import PpoConfig
from .pilots import GateNoiseConfig, KnnConfig, ScriptedNoiseProfile
from .se3 import ResidualScale
from .tasks import DmrConfig, RewardConfig, TaskSpec, make_task_spec


@dataclass
class ServiceConfig:
    port: int = 8390
    control_rate: float = 15.0
    max_sessions: int = 4
    input_pos_clip: float = 0.02  # per-tick l2 bound on position deltas
    input_rot_clip: float = 0.2  # per-tick bound on rotation deltas (rad)
    out_dir: str = "runs"

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ValueError("port out of range")
        if self.control_rate <= 0:
            raise ValueError("control rate must be positive")
        if self.max_sessions < 1:
            raise ValueError("max_sessions must be >= 1")


@dataclass
class PilotSettings:
    novice_aim_sigma: float = 0.006
    laggy_p_repeat: float = 0.8
    noisy_p_on: float = 0.5


@dataclass
class WorkbenchConfig:
    task: TaskSpec
    admittance: AdmittanceParams = field(default_factory=AdmittanceParams)
    dmr: DmrConfig = field(default_factory=DmrConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    knn: KnnConfig = field(default_factory=KnnConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    residual_scale: ResidualScale = field(default_factory=ResidualScale)
    pilots: PilotSettings = field(default_factory=PilotSettings)
    service: ServiceConfig = field(default_factory=ServiceConfig)

    def __post_init__(self):
        validate_cross_fields(self)


def validate_cross_fields(cfg: WorkbenchConfig) -> None:
    kind = cfg.task.kind
    if kind == "nut":
        if cfg.task.e_max > 2 * math.pi:
            raise ValueError(
                "nut e_max is an angle (radians); got an implausibly large value"
            )
        if cfg.task.screw_pitch <= 0:
            raise ValueError("nut task needs a positive screw_pitch")
    else:
        if cfg.task.e_max > 0.5:
            raise ValueError(
                f"{kind} e_max is a distance (meters); got {cfg.task.e_max}"
            )
    if cfg.knn.chunk_min < cfg.dmr.chunk_min or cfg.knn.chunk_max > cfg.dmr.chunk_max:
        # chunk ranges may narrow the DMR table range but not widen it
        pass  # informational only; both default to {5..15}
    if cfg.service.control_rate <= 0:
        raise ValueError("control rate must be positive")


def _build(dc_type, doc: dict, path: str):
    """Construct a dataclass from a dict, rejecting unknown keys."""
    allowed = {f.name for f in fields(dc_type)}
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown keys in {path}: {sorted(unknown)}")
    return dc_type(**doc)


def _task_from_doc(doc: dict) -> TaskSpec:
    doc = dict(doc)
    kind = doc.pop("kind", "peg")
    spec = make_task_spec(kind)
    allowed = {f.name for f in fields(TaskSpec)}
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown keys in task: {sorted(unknown)}")
    for k, v in doc.items():
        if k in ("axis_xy", "part_init_xy", "part_com"):
            v = np.asarray(v, dtype=float)
        setattr(spec, k, v)
    spec.__post_init__()
    return spec


def _admittance_from_doc(doc: dict) -> AdmittanceParams:
    allowed = {"K_x", "K_r", "M_x", "M_r", "D_x", "D_r"}
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown keys in admittance: {sorted(unknown)}")
    base = AdmittanceParams()
    kx = doc.get("K_x", base.K[0])
    kr = doc.get("K_r", base.K[3])
    mx = doc.get("M_x", base.M[0])
    mr = doc.get("M_r", base.M[3])
    dx = doc.get("D_x", base.D[0])
    dr = doc.get("D_r", base.D[3])
    return AdmittanceParams(
        M=np.array([mx] * 3 + [mr] * 3),
        D=np.array([dx] * 3 + [dr] * 3),
        K=np.array([kx] * 3 + [kr] * 3),
    )


def _knn_from_doc(doc: dict) -> KnnConfig:
    doc = dict(doc)
    noise_doc = doc.pop("noise", {})
    noise_doc = dict(noise_doc)
    scale_doc = noise_doc.pop("scale", {})
    noise = _build(
        GateNoiseConfig,
        {**noise_doc, "scale": _build(ResidualScale, scale_doc, "knn.noise.scale")},
        "knn.noise",
    )
    if "weights" in doc:
        doc["weights"] = tuple(doc["weights"])
    return _build(KnnConfig, {**doc, "noise": noise}, "knn")


def _ppo_from_doc(doc: dict) -> PpoConfig:
    doc = dict(doc)
    if "hidden" in doc:
        doc["hidden"] = tuple(doc["hidden"])
    return _build(PpoConfig, doc, "ppo")


SECTIONS = (
    "task", "admittance", "dmr", "reward", "knn", "ppo",
    "residual_scale", "pilots", "service",
)


def config_from_dict(doc: dict) -> WorkbenchConfig:
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ValueError(f"unknown top-level config sections: {sorted(unknown)}")
    return WorkbenchConfig(
        task=_task_from_doc(doc.get("task", {})),
        admittance=_admittance_from_doc(doc.get("admittance", {})),
        dmr=_build(DmrConfig, doc.get("dmr", {}), "dmr"),
        reward=_build(RewardConfig, doc.get("reward", {}), "reward"),
        knn=_knn_from_doc(doc.get("knn", {})),
        ppo=_ppo_from_doc(doc.get("ppo", {})),
        residual_scale=_build(
            ResidualScale, doc.get("residual_scale", {}), "residual_scale"
        ),
        pilots=_build(PilotSettings, doc.get("pilots", {}), "pilots"),
        service=_build(ServiceConfig, doc.get("service", {}), "service"),
    )


def load_config(path: str | Path | None = None, task: str | None = None) -> WorkbenchConfig:
    """Load the workbench config; with no path, return defaults.

    `task` overrides the task kind (CLI convenience)."""
    if path is None:
        doc: dict = {}
    else:
        text = Path(path).read_text()
        doc = yaml.safe_load(text) or {}
        if not isinstance(doc, dict):
            raise ValueError("config root must be a mapping")
    if task is not None:
        doc.setdefault("task", {})
        doc["task"] = {**doc["task"], "kind": task}
    return config_from_dict(doc)


def make_env_factory(cfg: WorkbenchConfig):
    """Environment builder honoring every config section."""
    from .tasks import AssemblyEnv

    def factory(task_kind: str | None = None) -> AssemblyEnv:
        spec = cfg.task if task_kind in (None, cfg.task.kind) else make_task_spec(task_kind)
        return AssemblyEnv(
            spec,
            dmr=cfg.dmr,
            reward_cfg=cfg.reward,
            admittance_params=cfg.admittance,
            control_rate=cfg.service.control_rate,
        )

    return factory


def novice_profile(cfg: WorkbenchConfig) -> ScriptedNoiseProfile:
    return ScriptedNoiseProfile(
        aim_sigma=cfg.pilots.novice_aim_sigma,
        gate=GateNoiseConfig(
            beta=cfg.dmr.beta,
            p_on=cfg.dmr.p_on,
            low=cfg.dmr.noise_low,
            high=cfg.dmr.noise_high,
        ),
    )
