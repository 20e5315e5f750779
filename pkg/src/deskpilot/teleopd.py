"""Real-time teleoperation service: 15 Hz session loop over a websocket.

Each connection owns one session: an environment, an integrated human target
(zero-order hold between inputs), optional copilot assistance in mean mode,
and a demonstration recorder. Client messages:

    {"type": "input", "dp": [x,y,z], "drot": [rx,ry,rz], "grip": g, "seq": n}
    {"type": "assist", "enabled": bool}
    {"type": "record", "enabled": bool}
    {"type": "reset", "seed": s}

The server emits one state message per tick:

    {"type": "state", "tick": n, "ee": {...}, "objects": [...], "wrench": [6],
     "progression": p, "reward": r, "events": [...], "assist": bool}

plus a single {"type": "config", ...} greeting after connect.
"""

import asyncio
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .config import WorkbenchConfig, make_env_factory
from .copilot import PolicyCheckpoint, policy_sample
from .pilots import DemoDataset, DemoEpisode, ScriptedPilot
from .se3 import (
    BaseAction,
    Pose,
    ResidualAction,
    axis_angle_to_quat,
    compose_residual,
    quat_mul,
    quat_normalize,
)
from .tasks import AssemblyEnv, observe_copilot, observe_state, progression

_session_counter = itertools.count(1)


@dataclass
class SessionState:
    """One live teleoperation session; exclusively owned by its control loop."""

    env: AssemblyEnv
    copilot: PolicyCheckpoint | None = None
    pilot_source: str = "human"  # or "scripted"
    input_pos_clip: float = 0.02
    input_rot_clip: float = 0.2
    record_path: str | Path | None = None
    checkpoint_path: str | None = None
    session_id: str = field(default_factory=lambda: f"s{next(_session_counter)}")

    assist_enabled: bool = False
    recording: bool = False
    tick: int = 0
    last_seq: int = -1
    seed: int = 0

    def __post_init__(self):
        self.scripted: ScriptedPilot | None = None
        self._episodes: list[DemoEpisode] = []
        self._buf_states: list[np.ndarray] = []
        self._buf_actions: list[np.ndarray] = []
        self._buf_assisted: list[bool] = []
        self._prev_res = ResidualAction.zero()
        self._last_base: BaseAction | None = None
        self.reset(seed=0)

    # -- lifecycle ------------------------------------------------------- #

    def reset(self, seed: int) -> None:
        self._flush_episode()
        self.seed = int(seed)
        state = self.env.reset(self.seed)
        self.target = BaseAction(state.ee.pose.copy(), state.gripper)
        self._prev_res = ResidualAction.zero()
        self._last_base = None
        if self.pilot_source == "scripted":
            self.scripted = ScriptedPilot(self.env.spec, seed=self.seed)

    def close(self) -> None:
        self._flush_episode()
        self._write_demo()

    # -- input ----------------------------------------------------------- #

    def apply_input(self, msg: dict) -> bool:
        """Integrate one input message into the target; duplicate sequence
        numbers are ignored (idempotent within a tick window)."""
        seq = int(msg.get("seq", self.last_seq + 1))
        if seq <= self.last_seq:
            return False
        self.last_seq = seq
        dp = np.asarray(msg.get("dp", [0.0, 0.0, 0.0]), dtype=float)
        drot = np.asarray(msg.get("drot", [0.0, 0.0, 0.0]), dtype=float)
        n = np.linalg.norm(dp)
        if n > self.input_pos_clip:
            dp = dp * (self.input_pos_clip / n)
        r = np.linalg.norm(drot)
        if r > self.input_rot_clip:
            drot = drot * (self.input_rot_clip / r)
        p = self.target.pose.p + dp
        q = quat_normalize(quat_mul(axis_angle_to_quat(drot), self.target.pose.q))
        grip = float(np.clip(msg.get("grip", self.target.gripper), -1.0, 1.0))
        self.target = BaseAction(Pose(p, q), grip)
        return True

    def set_absolute_target(self, action: BaseAction) -> None:
        self.target = action.copy()

    # -- stepping -------------------------------------------------------- #

    def tick_once(self, latest_input: dict | None = None) -> dict:
        """One 15 Hz control tick: integrate input, step, emit the snapshot.

        A terminated episode holds its final state (no stepping) until the
        client sends a reset.
        """
        if latest_input is not None:
            self.apply_input(latest_input)
        self.tick += 1
        state = self.env.state
        if state.terminated:
            return self._snapshot(state, reward=0.0, events=[])

        if self.pilot_source == "scripted" and self.scripted is not None:
            base = self.scripted.step(state)
        else:
            base = BaseAction(
                Pose(self.target.pose.p.copy(), self.target.pose.q.copy()),
                self.target.gripper,
            )
        if self.recording:
            self._buf_states.append(observe_state(state).copy())
            self._buf_actions.append(base.to_vector())
            self._buf_assisted.append(self.assist_enabled and self.copilot is not None)

        if self.assist_enabled and self.copilot is not None:
            obs = observe_copilot(state, base, self._prev_res)
            res, _ = policy_sample(self.copilot, obs, mode="mean")
            act = compose_residual(base, res, self.copilot.residual_scale)
        else:
            res = ResidualAction.zero()
            act = base
        state, reward, events = self.env.step(
            act, residual=res, prev_residual=self._prev_res
        )
        self._prev_res = res
        self._last_base = base
        if events and self.recording:
            # capture the terminal state as the closing hold record
            self._buf_states.append(observe_state(state).copy())
            self._buf_actions.append(base.to_vector())
            self._buf_assisted.append(self.assist_enabled and self.copilot is not None)
            self._flush_episode()
        return self._snapshot(state, reward=reward, events=events)

    # -- recording ------------------------------------------------------- #

    def set_recording(self, enabled: bool) -> None:
        if self.recording and not enabled:
            self._flush_episode()
            self._write_demo()
        self.recording = enabled

    def _flush_episode(self) -> None:
        if not self._buf_actions:
            return
        self._episodes.append(
            DemoEpisode(
                episode_id=len(self._episodes),
                seed=self.seed,
                states=np.array(self._buf_states),
                actions=np.array(self._buf_actions),
                assisted=np.array(self._buf_assisted, dtype=bool),
                t=np.arange(len(self._buf_actions)),
            )
        )
        self._buf_states, self._buf_actions, self._buf_assisted = [], [], []

    def _write_demo(self) -> None:
        if not self._episodes or self.record_path is None:
            return
        data = DemoDataset(
            episodes=self._episodes,
            task_kind=self.env.spec.kind,
            rate_hz=self.env.control_rate,
            collector=f"teleop:{self.session_id}",
            checkpoint=self.checkpoint_path,
        )
        Path(self.record_path).parent.mkdir(parents=True, exist_ok=True)
        data.save(self.record_path)

    # -- outbound -------------------------------------------------------- #

    def _snapshot(self, state, reward: float, events: list[str]) -> dict:
        spec = self.env.spec
        return {
            "type": "state",
            "tick": self.tick,
            "ee": {
                "p": state.ee.pose.p.tolist(),
                "q": state.ee.pose.q.tolist(),
                "v": state.ee.xi_dot.tolist(),
                "gripper": state.gripper,
            },
            "objects": [
                {
                    "name": "held",
                    "p": state.held_pose.p.tolist(),
                    "q": state.held_pose.q.tolist(),
                    "attached": state.attached,
                },
                {
                    "name": "fixed",
                    "p": state.fixed_pose.p.tolist(),
                    "q": state.fixed_pose.q.tolist(),
                    "attached": False,
                },
            ],
            "wrench": state.wrench.to_vector().tolist(),
            "progression": progression(state, spec),
            "reward": reward,
            "events": list(events),
            "assist": self.assist_enabled,
            "recording": self.recording,
            "terminated": state.terminated,
        }

    def config_message(self) -> dict:
        spec = self.env.spec
        return {
            "type": "config",
            "session": self.session_id,
            "rate_hz": self.env.control_rate,
            "task": {
                "kind": spec.kind,
                "hole_radius": spec.hole_radius,
                "part_radius": spec.part_radius,
                "part_length": spec.part_length,
                "axis_xy": spec.axis_xy.tolist(),
                "entry_z": spec.entry_z,
                "plate_radius": spec.plate_radius,
                "base_radius": spec.base_radius,
                "base_z": spec.base_z,
                "table_z": spec.table_z,
                "insertion_depth": spec.insertion_depth,
                "force_limit": spec.force_limit,
                "e_max": spec.e_max,
                "success_pose_p": spec.success_pose.p.tolist(),
            },
            "assist_available": self.copilot is not None,
        }


def make_app(
    cfg: WorkbenchConfig,
    checkpoint: str | None = None,
    record_dir: str | None = None,
    pilot_source: str = "human",
):
    """FastAPI application exposing /ws and a static frontend if present."""
    app = FastAPI(title="deskpilot teleop service")
    env_factory = make_env_factory(cfg)
    ckpt = PolicyCheckpoint.load(checkpoint) if checkpoint else None
    sessions: dict[str, SessionState] = {}
    app.state.sessions = sessions

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        if len(sessions) >= cfg.service.max_sessions:
            await ws.close(code=1013, reason="session limit reached")
            return
        session = SessionState(
            env=env_factory(),
            copilot=ckpt,
            pilot_source=pilot_source,
            input_pos_clip=cfg.service.input_pos_clip,
            input_rot_clip=cfg.service.input_rot_clip,
            record_path=(
                Path(record_dir) / "session.jsonl" if record_dir else None
            ),
            checkpoint_path=checkpoint,
        )
        if record_dir:
            session.record_path = Path(record_dir) / f"{session.session_id}.jsonl"
        sessions[session.session_id] = session
        mailbox: dict = {"input": None}
        stop = asyncio.Event()

        async def control_loop():
            period = 1.0 / cfg.service.control_rate
            loop = asyncio.get_event_loop()
            next_t = loop.time()
            while not stop.is_set():
                latest, mailbox["input"] = mailbox["input"], None
                msg = session.tick_once(latest)
                try:
                    await ws.send_text(json.dumps(msg))
                except Exception:
                    break
                next_t += period
                delay = next_t - loop.time()
                if delay > 0:
                    await asyncio.sleep(delay)
                else:
                    next_t = loop.time()  # fell behind; do not burst

        task = asyncio.create_task(control_loop())
        try:
            await ws.send_text(json.dumps(session.config_message()))
            while True:
                raw = await ws.receive_text()
                try:
                    msg = json.loads(raw)
                except json.JSONDecodeError:
                    continue
                kind = msg.get("type")
                if kind == "input":
                    mailbox["input"] = msg
                elif kind == "assist":
                    session.assist_enabled = bool(msg.get("enabled", False))
                elif kind == "record":
                    session.set_recording(bool(msg.get("enabled", False)))
                elif kind == "reset":
                    session.reset(int(msg.get("seed", 0)))
        except WebSocketDisconnect:
            pass
        finally:
            stop.set()
            task.cancel()
            session.close()
            sessions.pop(session.session_id, None)

    frontend = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if frontend.is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(frontend), html=True), name="ui")

    return app


def serve(cfg: WorkbenchConfig, checkpoint: str | None, record_dir: str | None,
          port: int | None = None, pilot_source: str = "human") -> None:
    import uvicorn

    app = make_app(cfg, checkpoint=checkpoint, record_dir=record_dir,
                   pilot_source=pilot_source)
    uvicorn.run(app, host="0.0.0.0", port=port or cfg.service.port, log_level="warning")
