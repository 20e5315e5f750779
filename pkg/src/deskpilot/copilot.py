"""Residual copilot: Gaussian policy over the 7D residual, trained with PPO.

The network is a small shared-trunk actor-critic (ELU MLP) implemented in
numpy with hand-written backprop: the parameter count is tiny, checkpoints
round-trip bit-exactly, and training is deterministic for a fixed seed and
actor count. Residual outputs are squashed to [-1, 1] with tanh; log-probs
carry the corresponding Jacobian correction.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .se3 import ResidualAction, ResidualScale, RunningNormalizer, compose_residual
from .tasks import OBS_DIM, AssemblyEnv, observe_copilot

CKPT_FORMAT = "deskpilot-ckpt-v1"
ACT_DIM = 7
LOG2PI = math.log(2.0 * math.pi)

PARAM_ORDER = ("W0", "b0", "W1", "b1", "Wm", "bm", "log_std", "Wv", "bv")


# --------------------------------------------------------------------------- #
# configuration
# --------------------------------------------------------------------------- #


@dataclass
class PpoConfig:
    gamma: float = 0.995
    lam: float = 0.95
    clip: float = 0.2
    kl_threshold: float = 0.008
    lr: float = 1e-4
    entropy_coef: float = 0.0
    critic_coef: float = 2.0
    grad_clip: float = 1.0
    epochs: int = 4
    horizon: int = 128
    actors: int = 16
    minibatch: int = 512
    total_steps: int = 400_000
    hidden: tuple[int, ...] = (128, 64)
    # positional exploration matters most; rotation wobble mostly hurts
    init_log_std: tuple[float, ...] = (-1.2, -1.2, -1.2, -2.0, -2.0, -2.0, -1.6)
    lr_min: float = 1e-6
    lr_max: float = 3e-3
    eval_every: int = 25  # iterations between learning-curve points
    eval_episodes: int = 20
    select_best: bool = True  # return the best-eval checkpoint, not the last

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip epsilon must be positive")


# --------------------------------------------------------------------------- #
# network
# --------------------------------------------------------------------------- #


def orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(
    rng: np.random.Generator, hidden: tuple[int, ...] = (128, 64),
    init_log_std=-1.0, obs_dim: int = OBS_DIM,
) -> dict[str, np.ndarray]:
    """init_log_std may be a scalar or a per-dimension 7-vector."""
    if len(hidden) != 2:
        raise ValueError("the trunk is two hidden layers")
    h0, h1 = hidden
    log_std = np.broadcast_to(np.asarray(init_log_std, dtype=float), (ACT_DIM,)).copy()
    return {
        "W0": orthogonal(rng, obs_dim, h0, math.sqrt(2.0)),
        "b0": np.zeros(h0),
        "W1": orthogonal(rng, h0, h1, math.sqrt(2.0)),
        "b1": np.zeros(h1),
        "Wm": orthogonal(rng, h1, ACT_DIM, 0.01),
        "bm": np.zeros(ACT_DIM),
        "log_std": log_std,
        "Wv": orthogonal(rng, h1, 1, 1.0),
        "bv": np.zeros(1),
    }


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(x))


def _elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, np.exp(x))


def net_forward(params: dict, x: np.ndarray, need_cache: bool = False):
    """Trunk + heads. x is (B, obs_dim) already normalized."""
    z0 = x @ params["W0"] + params["b0"]
    h0 = _elu(z0)
    z1 = h0 @ params["W1"] + params["b1"]
    h1 = _elu(z1)
    mean = h1 @ params["Wm"] + params["bm"]
    value = (h1 @ params["Wv"] + params["bv"])[:, 0]
    if not need_cache:
        return mean, value, None
    return mean, value, {"x": x, "z0": z0, "h0": h0, "z1": z1, "h1": h1}


def net_backward(
    params: dict, cache: dict, d_mean: np.ndarray, d_value: np.ndarray
) -> dict[str, np.ndarray]:
    """Backprop d(loss)/d(mean, value) into parameter gradients (shared trunk)."""
    grads = {}
    h1, h0, x = cache["h1"], cache["h0"], cache["x"]
    grads["Wm"] = h1.T @ d_mean
    grads["bm"] = d_mean.sum(axis=0)
    dv = d_value[:, None]
    grads["Wv"] = h1.T @ dv
    grads["bv"] = dv.sum(axis=0)
    d_h1 = d_mean @ params["Wm"].T + dv @ params["Wv"].T
    d_z1 = d_h1 * _elu_grad(cache["z1"])
    grads["W1"] = h0.T @ d_z1
    grads["b1"] = d_z1.sum(axis=0)
    d_h0 = d_z1 @ params["W1"].T
    d_z0 = d_h0 * _elu_grad(cache["z0"])
    grads["W0"] = x.T @ d_z0
    grads["b0"] = d_z0.sum(axis=0)
    return grads


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density of pre-squash samples z, shape (B,)."""
    inv_var = np.exp(-2.0 * log_std)
    return -0.5 * (
        np.sum((z - mean) ** 2 * inv_var, axis=-1)
        + 2.0 * np.sum(log_std)
        + ACT_DIM * LOG2PI
    )


def tanh_correction(z: np.ndarray) -> np.ndarray:
    """Log |d tanh(z)/dz| summed over dims; subtracted for the action density."""
    # log(1 - tanh(z)^2) = 2 (log 2 - z - softplus(-2z)), numerically stable
    return np.sum(2.0 * (math.log(2.0) - z - np.logaddexp(0.0, -2.0 * z)), axis=-1)


# --------------------------------------------------------------------------- #
# checkpoint
# --------------------------------------------------------------------------- #


@dataclass
class PolicyCheckpoint:
    """Frozen policy: parameters + frozen observation normalizer."""

    params: dict[str, np.ndarray]
    obs_normalizer: RunningNormalizer
    value_normalizer: RunningNormalizer
    residual_scale: ResidualScale = field(default_factory=ResidualScale)
    hidden: tuple[int, ...] = (128, 64)
    version: str = CKPT_FORMAT

    def __post_init__(self):
        for name in PARAM_ORDER:
            if name not in self.params:
                raise ValueError(f"checkpoint missing parameter {name!r}")
            if not np.all(np.isfinite(self.params[name])):
                raise ValueError(f"checkpoint parameter {name!r} is not finite")
        if not self.obs_normalizer.frozen:
            raise ValueError("checkpoint requires a frozen observation normalizer")

    def save(self, path: str | Path) -> None:
        doc = {
            "format": self.version,
            "arch": {
                "obs_dim": OBS_DIM,
                "act_dim": ACT_DIM,
                "hidden": list(self.hidden),
                "activation": "elu",
                "param_order": list(PARAM_ORDER),
            },
            "params": {k: self.params[k].tolist() for k in PARAM_ORDER},
            "obs_normalizer": self.obs_normalizer.state_dict(),
            "value_normalizer": self.value_normalizer.state_dict(),
            "residual_scale": {
                "s_p": self.residual_scale.s_p,
                "s_r": self.residual_scale.s_r,
                "s_u": self.residual_scale.s_u,
            },
        }
        Path(path).write_text(json.dumps(doc))

    @staticmethod
    def load(path: str | Path) -> "PolicyCheckpoint":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != CKPT_FORMAT:
            raise ValueError(f"unsupported checkpoint format: {doc.get('format')!r}")
        params = {k: np.array(v) for k, v in doc["params"].items()}
        rs = doc["residual_scale"]
        return PolicyCheckpoint(
            params=params,
            obs_normalizer=RunningNormalizer.from_state_dict(doc["obs_normalizer"]),
            value_normalizer=RunningNormalizer.from_state_dict(doc["value_normalizer"]),
            residual_scale=ResidualScale(rs["s_p"], rs["s_r"], rs["s_u"]),
            hidden=tuple(doc["arch"]["hidden"]),
        )


def policy_sample(
    ckpt: PolicyCheckpoint,
    obs: np.ndarray,
    mode: str = "stochastic",
    rng: np.random.Generator | None = None,
) -> tuple[ResidualAction, float]:
    """Sample (or take the mean of) the squashed residual policy.

    Returns the action and its log density (tanh-corrected). Inference never
    mutates the checkpoint's normalizer statistics.
    """
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (OBS_DIM,):
        raise ValueError(f"observation must have shape ({OBS_DIM},), got {obs.shape}")
    x = ckpt.obs_normalizer.normalize(obs)[None, :]
    mean, _, _ = net_forward(ckpt.params, x)
    mean = mean[0]
    if mode == "mean":
        z = mean
    elif mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic mode needs an rng")
        z = mean + np.exp(ckpt.params["log_std"]) * rng.normal(size=ACT_DIM)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    logp = float(
        gaussian_log_prob(mean[None, :], ckpt.params["log_std"], z[None, :])[0]
        - tanh_correction(z[None, :])[0]
    )
    return ResidualAction.from_vector(np.tanh(z)), logp


# --------------------------------------------------------------------------- #
# GAE
# --------------------------------------------------------------------------- #


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    last_values: np.ndarray,
    gamma: float,
    lam: float,
    normalize: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over (T, N) actor-major segments.

    dones[t] marks transitions that ended an episode at step t (no bootstrap
    through them). Advantages are normalized to zero mean / unit variance per
    batch unless disabled.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    t_len = rewards.shape[0]
    adv = np.zeros_like(rewards)
    lastgaelam = np.zeros_like(last_values)
    for t in reversed(range(t_len)):
        next_v = values[t + 1] if t < t_len - 1 else last_values
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        lastgaelam = delta + gamma * lam * nonterminal * lastgaelam
        adv[t] = lastgaelam
    returns = adv + values
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


# --------------------------------------------------------------------------- #
# rollout buffer
# --------------------------------------------------------------------------- #


@dataclass
class RolloutBuffer:
    horizon: int
    actors: int
    obs: np.ndarray = field(init=False)
    z: np.ndarray = field(init=False)  # pre-squash samples
    logp: np.ndarray = field(init=False)
    mean: np.ndarray = field(init=False)
    value: np.ndarray = field(init=False)
    reward: np.ndarray = field(init=False)
    done: np.ndarray = field(init=False)
    pos: int = 0
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __post_init__(self):
        t, n = self.horizon, self.actors
        self.obs = np.zeros((t, n, OBS_DIM))
        self.z = np.zeros((t, n, ACT_DIM))
        self.logp = np.zeros((t, n))
        self.mean = np.zeros((t, n, ACT_DIM))
        self.value = np.zeros((t, n))
        self.reward = np.zeros((t, n))
        self.done = np.zeros((t, n))

    @property
    def full(self) -> bool:
        return self.pos == self.horizon

    def add(self, obs, z, logp, mean, value, reward, done) -> None:
        if self.full:
            raise RuntimeError("rollout buffer is full")
        t = self.pos
        self.obs[t] = obs
        self.z[t] = z
        self.logp[t] = logp
        self.mean[t] = mean
        self.value[t] = value
        self.reward[t] = reward
        self.done[t] = done
        self.pos += 1

    def compute_advantages(self, last_values, gamma, lam) -> None:
        self.advantages, self.returns = gae(
            self.reward, self.value, self.done, last_values, gamma, lam, normalize=True
        )

    def flat(self) -> dict[str, np.ndarray]:
        if self.advantages is None or self.returns is None:
            raise RuntimeError("advantages must be computed before minibatching")
        n = self.horizon * self.actors
        return {
            "obs": self.obs.reshape(n, OBS_DIM),
            "z": self.z.reshape(n, ACT_DIM),
            "logp": self.logp.reshape(n),
            "mean": self.mean.reshape(n, ACT_DIM),
            "adv": self.advantages.reshape(n),
            "ret": self.returns.reshape(n),
        }

    def clear(self) -> None:
        self.pos = 0
        self.advantages = None
        self.returns = None


# --------------------------------------------------------------------------- #
# PPO update
# --------------------------------------------------------------------------- #


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    obs_normalizer: RunningNormalizer
    value_normalizer: RunningNormalizer
    lr: float
    adam_m: dict[str, np.ndarray] = field(default=None)  # type: ignore[assignment]
    adam_v: dict[str, np.ndarray] = field(default=None)  # type: ignore[assignment]
    adam_t: int = 0

    def __post_init__(self):
        if self.adam_m is None:
            self.adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
        if self.adam_v is None:
            self.adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}


def surrogate_loss_and_grads(
    params: dict,
    batch: dict[str, np.ndarray],
    cfg: PpoConfig,
    value_normalizer: RunningNormalizer,
):
    """Clipped-surrogate + critic loss with analytic gradients.

    Returns (loss, grads, stats). The loss is exactly what the gradient
    differentiates, so central finite differences over it must agree.
    """
    obs, z, old_logp, adv, ret = (
        batch["obs"], batch["z"], batch["logp"], batch["adv"], batch["ret"],
    )
    b = obs.shape[0]
    mean, value, cache = net_forward(params, obs, need_cache=True)
    log_std = params["log_std"]
    new_logp = gaussian_log_prob(mean, log_std, z)
    # overflow here is caught by the finiteness check on the loss
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(new_logp - old_logp)
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    s1 = ratio * adv
    s2 = clipped * adv
    surrogate = np.minimum(s1, s2)
    policy_loss = -float(np.mean(surrogate))

    ret_n = value_normalizer.normalize(ret[:, None])[:, 0]
    v_err = value - ret_n
    value_loss = float(np.mean(v_err**2))

    loss = policy_loss + cfg.critic_coef * value_loss

    # d loss / d ratio: one-sided through the min/clip composition
    use_s1 = s1 <= s2
    within = (ratio >= 1.0 - cfg.clip) & (ratio <= 1.0 + cfg.clip)
    active = use_s1 | within
    with np.errstate(over="ignore", invalid="ignore"):
        d_ratio = np.where(active, adv, 0.0) * (-1.0 / b)
        d_logp = d_ratio * ratio
        inv_var = np.exp(-2.0 * log_std)
        d_mean = d_logp[:, None] * (z - mean) * inv_var
        d_log_std = np.sum(
            d_logp[:, None] * ((z - mean) ** 2 * inv_var - 1.0), axis=0
        )
        d_value = cfg.critic_coef * 2.0 * v_err / b
        grads = net_backward(params, cache, d_mean, d_value)
    grads["log_std"] = d_log_std

    stats = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
        "new_logp": new_logp,
        "mean": mean,
    }
    return loss, grads, stats


def exact_gaussian_kl(
    mean_old: np.ndarray, log_std_old: np.ndarray, mean_new: np.ndarray,
    log_std_new: np.ndarray,
) -> float:
    var_old = np.exp(2.0 * log_std_old)
    var_new = np.exp(2.0 * log_std_new)
    per_dim = (
        log_std_new - log_std_old
        + (var_old + (mean_old - mean_new) ** 2) / (2.0 * var_new)
        - 0.5
    )
    return float(np.mean(np.sum(per_dim, axis=-1)))


def clip_grads_global(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def ppo_update(state: TrainState, buffer: RolloutBuffer, cfg: PpoConfig, rng) -> dict:
    """Run cfg.epochs of minibatched clipped-surrogate optimization."""
    if not buffer.full:
        raise RuntimeError("buffer must be full before an update")
    data = buffer.flat()
    n = data["obs"].shape[0]
    old_log_std = state.params["log_std"].copy()

    kls, losses, clips = [], [], []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_kls = []
        for start in range(0, n, cfg.minibatch):
            idx = order[start : start + cfg.minibatch]
            batch = {k: v[idx] for k, v in data.items()}
            loss, grads, stats = surrogate_loss_and_grads(
                state.params, batch, cfg, state.value_normalizer
            )
            if not math.isfinite(loss):
                raise RuntimeError(
                    f"non-finite PPO loss: policy={stats['policy_loss']}, "
                    f"value={stats['value_loss']}"
                )
            kl = exact_gaussian_kl(
                batch["mean"], old_log_std, stats["mean"], state.params["log_std"]
            )
            clip_grads_global(grads, cfg.grad_clip)
            _adam_step(state, grads)
            epoch_kls.append(kl)
            losses.append(loss)
            clips.append(stats["clip_fraction"])
        # adaptive LR around the KL trust region, once per epoch batch
        epoch_kl = float(np.mean(epoch_kls))
        if epoch_kl > cfg.kl_threshold:
            state.lr = max(cfg.lr_min, state.lr * 0.5)
        elif epoch_kl < 0.5 * cfg.kl_threshold:
            state.lr = min(cfg.lr_max, state.lr * 1.5)
        kls.extend(epoch_kls)
    buffer.clear()
    return {
        "loss": float(np.mean(losses)),
        "kl": float(np.mean(kls)),
        "clip_fraction": float(np.mean(clips)),
        "lr": state.lr,
    }


def _adam_step(state: TrainState, grads: dict[str, np.ndarray]) -> None:
    b1, b2, eps = 0.9, 0.999, 1e-8
    state.adam_t += 1
    t = state.adam_t
    for k, g in grads.items():
        state.adam_m[k] = b1 * state.adam_m[k] + (1 - b1) * g
        state.adam_v[k] = b2 * state.adam_v[k] + (1 - b2) * g * g
        m_hat = state.adam_m[k] / (1 - b1**t)
        v_hat = state.adam_v[k] / (1 - b2**t)
        state.params[k] = state.params[k] - state.lr * m_hat / (np.sqrt(v_hat) + eps)


# --------------------------------------------------------------------------- #
# training loop
# --------------------------------------------------------------------------- #


@dataclass
class LearningCurvePoint:
    iteration: int
    env_steps: int
    mean_progression: float
    success_rate: float
    mean_reward: float


def make_checkpoint(state: TrainState, scale: ResidualScale, hidden) -> PolicyCheckpoint:
    obs_n = RunningNormalizer.from_state_dict(state.obs_normalizer.state_dict())
    obs_n.freeze()
    val_n = RunningNormalizer.from_state_dict(state.value_normalizer.state_dict())
    val_n.freeze()
    return PolicyCheckpoint(
        params={k: v.copy() for k, v in state.params.items()},
        obs_normalizer=obs_n,
        value_normalizer=val_n,
        residual_scale=scale,
        hidden=tuple(hidden),
    )


def evaluate_policy(
    env_factory,
    pilot_factory,
    ckpt: PolicyCheckpoint | None,
    episodes: int,
    seed: int,
) -> tuple[float, float, float]:
    """Deterministic (mean-mode) evaluation; returns (progression, success, reward)."""
    from .tasks import progression as task_progression

    progs, succ, rews = [], 0, []
    for i in range(episodes):
        env = env_factory()
        pilot = pilot_factory(seed + 7919 * i)
        state = env.reset(seed + i)
        pilot.reset(seed + 7919 * i)
        prev_res = ResidualAction.zero()
        total = 0.0
        events: list[str] = []
        while not state.terminated:
            base = pilot.step(state)
            if ckpt is not None:
                obs = observe_copilot(state, base, prev_res)
                res, _ = policy_sample(ckpt, obs, mode="mean")
                act = compose_residual(base, res, ckpt.residual_scale)
            else:
                res = ResidualAction.zero()
                act = base
            state, r, events = env.step(act, residual=res, prev_residual=prev_res)
            prev_res = res
            total += r
        progs.append(task_progression(state, env.spec))
        succ += "success" in events
        rews.append(total)
    return float(np.mean(progs)), succ / episodes, float(np.mean(rews))


def train(
    env_factory,
    pilot_factory,
    cfg: PpoConfig,
    scale: ResidualScale | None = None,
    seed: int = 0,
    verbose: bool = False,
) -> tuple[PolicyCheckpoint, list[LearningCurvePoint]]:
    """Train the residual copilot against a pilot in simulation.

    env_factory() -> AssemblyEnv and pilot_factory(seed) -> pilot build fresh
    per-actor instances; both must be deterministic functions of their seeds.
    """
    scale = scale if scale is not None else ResidualScale()
    rng = np.random.default_rng(seed)
    state = TrainState(
        params=init_params(rng, cfg.hidden, cfg.init_log_std),
        obs_normalizer=RunningNormalizer(dim=OBS_DIM),
        value_normalizer=RunningNormalizer(dim=1),
        lr=cfg.lr,
    )
    buffer = RolloutBuffer(cfg.horizon, cfg.actors)

    envs: list[AssemblyEnv] = [env_factory() for _ in range(cfg.actors)]
    pilots = []
    seed_rng = np.random.default_rng(seed + 1)
    states = []
    prev_res = [ResidualAction.zero() for _ in range(cfg.actors)]
    pending_base = [None] * cfg.actors
    pending_obs = np.zeros((cfg.actors, OBS_DIM))

    for i, env in enumerate(envs):
        ep_seed = int(seed_rng.integers(0, 2**31))
        states.append(env.reset(ep_seed))
        pilot = pilot_factory(int(seed_rng.integers(0, 2**31)))
        pilots.append(pilot)
        pending_base[i] = pilot.step(states[i])
        pending_obs[i] = observe_copilot(states[i], pending_base[i], prev_res[i])

    curve: list[LearningCurvePoint] = []
    env_steps = 0
    iteration = 0
    t_start = time.time()
    best: tuple[float, PolicyCheckpoint] | None = None

    def eval_point():
        nonlocal best
        ckpt = make_checkpoint(state, scale, cfg.hidden)
        prog, succ, rew = evaluate_policy(
            env_factory, pilot_factory, ckpt, cfg.eval_episodes, seed + 500_000
        )
        curve.append(LearningCurvePoint(iteration, env_steps, prog, succ, rew))
        if best is None or prog >= best[0]:
            best = (prog, ckpt)
        if verbose:
            print(
                f"iter {iteration:4d} steps {env_steps:8d} "
                f"prog {prog:.3f} succ {succ:.2f} rew {rew:8.2f} "
                f"({time.time() - t_start:5.0f}s)",
                flush=True,
            )

    eval_point()  # baseline with the freshly initialized (near-zero) policy

    while env_steps < cfg.total_steps:
        for _ in range(cfg.horizon):
            state.obs_normalizer.update(pending_obs)
            x = state.obs_normalizer.normalize(pending_obs)
            mean, v_norm, _ = net_forward(state.params, x)
            z = mean + np.exp(state.params["log_std"]) * rng.normal(
                size=(cfg.actors, ACT_DIM)
            )
            logp = gaussian_log_prob(mean, state.params["log_std"], z)
            v_raw = state.value_normalizer.denormalize(v_norm[:, None])[:, 0]

            rewards = np.zeros(cfg.actors)
            dones = np.zeros(cfg.actors)
            # the buffer holds collection-time normalized observations; the
            # update replays the net on exactly these inputs
            obs_snapshot = x.copy()
            for i in range(cfg.actors):
                res = ResidualAction.from_vector(np.tanh(z[i]))
                act = compose_residual(pending_base[i], res, scale)
                states[i], r, events = envs[i].step(
                    act, residual=res, prev_residual=prev_res[i]
                )
                prev_res[i] = res
                rewards[i] = r
                if states[i].terminated:
                    dones[i] = 1.0
                    ep_seed = int(seed_rng.integers(0, 2**31))
                    states[i] = envs[i].reset(ep_seed)
                    pilots[i].reset(int(seed_rng.integers(0, 2**31)))
                    prev_res[i] = ResidualAction.zero()
                pending_base[i] = pilots[i].step(states[i])
                pending_obs[i] = observe_copilot(
                    states[i], pending_base[i], prev_res[i]
                )
            buffer.add(obs_snapshot, z, logp, mean, v_raw, rewards, dones)
            env_steps += cfg.actors

        x_last = state.obs_normalizer.normalize(pending_obs)
        _, v_last_norm, _ = net_forward(state.params, x_last)
        last_values = state.value_normalizer.denormalize(v_last_norm[:, None])[:, 0]
        buffer.compute_advantages(last_values, cfg.gamma, cfg.lam)
        state.value_normalizer.update(buffer.returns.reshape(-1, 1))
        ppo_update(state, buffer, cfg, rng)
        iteration += 1
        if iteration % cfg.eval_every == 0:
            eval_point()

    if not curve or curve[-1].iteration != iteration:
        eval_point()
    if cfg.select_best and best is not None:
        return best[1], curve
    return make_checkpoint(state, scale, cfg.hidden), curve
