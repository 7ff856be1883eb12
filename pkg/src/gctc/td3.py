"""
TD3 training of the gray-box computed-torque policy.

The actor is not a network: it is the computed-torque law with eight
trainable scalars.  The deterministic policy gradient is assembled from the
critic's action-gradient and the analytic parameter Jacobian of the law.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import approximator as mlp
from .controllers import ConstraintBox, DEFAULT_EPS, PolicyParams, constrain_params, gctc_action_batch, gctc_jacobian_batch
from .dynamics import PlantParams
from .errors import ConfigError, DivergenceError
from .observation import DIM as STATE_DIM, AgentState, assemble_state, sech_reward
from .simulation import TrackingEnv, clip_torque
from .trajectories import TrajectorySpec

__all__ = [
    "AgentState", "assemble_state", "TrainerConfig", "Transition", "ReplayBuffer", "Batch",
    "Adam", "reward", "critic_target", "critic_update", "actor_update", "soft_update",
    "Learner", "run_episode", "train", "LOG_COLUMNS",
]

ACTION_DIM = 2
# rate errors carry no weight: a short-horizon critic sees a corrective torque
# raise the error rate first, which biases the policy gradient
DEFAULT_HE = (100.0, 100.0, 40.0, 10.0, 10.0, 4.0, 0.0, 0.0, 0.0)
DEFAULT_STATE_SCALE = (0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.5, 0.5, 0.5, 2.0, 2.0, 3.0, 5.0, 5.0, 10.0, 3.14)
LOG_COLUMNS = ("t", "episode", "reward", "loss", *PolicyParams.NAMES)


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    eta: float = 0.005
    policy_delay: int = 2
    batch_size: int = 128
    explore_sigma: float = 0.5
    target_sigma: float = 1.0
    target_clip: float = 2.5
    critic_lr: float = 1e-3
    actor_lr: float = 3e-4
    warmup_steps: int = 200
    buffer_capacity: int = 50_000
    He: tuple = tuple(tuple(v if i == j else 0.0 for j in range(9)) for i, v in enumerate(DEFAULT_HE))
    Hu: tuple = ((1e-3, 0.0), (0.0, 1e-3))
    max_track_error: float = 1.0
    max_episode_len: float = 5.0
    episodes: int = 11
    control_period: float = 1e-2
    plant_dt: float = 1e-3
    critic_hidden: tuple = (64, 64)
    state_scale: tuple = DEFAULT_STATE_SCALE
    start_pos_sigma: float = 0.05
    start_heading_sigma: float = 0.05

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigError("trainer.gamma must lie in (0, 1)")
        if not 0 < self.eta <= 1:
            raise ConfigError("trainer.eta must lie in (0, 1]")
        if int(self.policy_delay) != self.policy_delay or self.policy_delay < 1:
            raise ConfigError("trainer.policy_delay must be an integer >= 1")
        for name in ("batch_size", "buffer_capacity"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"trainer.{name} must be positive")
        if self.warmup_steps < 0 or self.episodes < 0:
            raise ConfigError("trainer.warmup_steps and trainer.episodes must be non-negative")
        for name in ("explore_sigma", "target_sigma", "target_clip", "critic_lr", "actor_lr",
                     "max_track_error", "max_episode_len", "control_period", "plant_dt"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"trainer.{name} must be positive")
        He = np.asarray(self.He, dtype=float)
        Hu = np.asarray(self.Hu, dtype=float)
        if He.shape != (9, 9) or Hu.shape != (2, 2):
            raise ConfigError("trainer.He must be 9x9 and trainer.Hu 2x2")
        if not (np.allclose(He, He.T) and np.allclose(Hu, Hu.T)):
            raise ConfigError("trainer.He and trainer.Hu must be symmetric")
        if np.linalg.eigvalsh(He).min() < -1e-12:
            raise ConfigError("trainer.He must be positive semi-definite")
        if np.linalg.eigvalsh(Hu).min() <= 0:
            raise ConfigError("trainer.Hu must be positive definite")
        if len(self.state_scale) != STATE_DIM or min(self.state_scale) <= 0:
            raise ConfigError(f"trainer.state_scale needs {STATE_DIM} positive entries")
        object.__setattr__(self, "He", tuple(tuple(float(v) for v in row) for row in He))
        object.__setattr__(self, "Hu", tuple(tuple(float(v) for v in row) for row in Hu))
        object.__setattr__(self, "critic_hidden", tuple(int(h) for h in self.critic_hidden))
        object.__setattr__(self, "state_scale", tuple(float(v) for v in self.state_scale))
        object.__setattr__(self, "policy_delay", int(self.policy_delay))
        object.__setattr__(self, "batch_size", int(self.batch_size))
        object.__setattr__(self, "buffer_capacity", int(self.buffer_capacity))
        object.__setattr__(self, "warmup_steps", int(self.warmup_steps))
        object.__setattr__(self, "episodes", int(self.episodes))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["He"] = [list(r) for r in self.He]
        d["Hu"] = [list(r) for r in self.Hu]
        d["critic_hidden"] = list(self.critic_hidden)
        d["state_scale"] = list(self.state_scale)
        return d


def reward(s, u, He, Hu) -> float:
    """``sech(E' He E + u' Hu u)`` with ``E = [e, e_int, e_dot]``."""
    E = s.tracking_error if isinstance(s, AgentState) else np.asarray(s, dtype=float)[:9]
    return sech_reward(E, u, He, Hu)


class Transition(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    done: bool


class Batch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray


class ReplayBuffer:
    """Bounded FIFO transition store with uniform sampling."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity = int(capacity)
        self.rng = rng
        self._s = np.zeros((self.capacity, STATE_DIM))
        self._a = np.zeros((self.capacity, ACTION_DIM))
        self._r = np.zeros(self.capacity)
        self._s2 = np.zeros((self.capacity, STATE_DIM))
        self._d = np.zeros(self.capacity)
        self._next = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, tr: Transition):
        i = self._next
        self._s[i] = tr.s
        self._a[i] = tr.a
        self._r[i] = tr.r
        self._s2[i] = tr.s2
        self._d[i] = float(tr.done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n: int) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.rng.integers(0, self.size, size=n)

    def sample(self, n: int) -> Batch:
        idx = self.sample_indices(n)
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._d[idx])


class Adam:
    """Adaptive-moment optimizer over a list of arrays."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: list, grads: list, ascent: bool = False) -> list:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.t
        corr2 = 1 - b2 ** self.t
        sign = 1.0 if ascent else -1.0
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            step = self.lr * (self.m[k] / corr1) / (np.sqrt(self.v[k] / corr2) + self.eps)
            out.append(p + sign * step)
        return out


@dataclass
class PolicyContext:
    """Fixed quantities the gray-box policy needs besides its parameters."""

    box: ConstraintBox
    eps: float
    R: float
    W: float
    tau_max: float

    def act(self, S, pi) -> np.ndarray:
        return gctc_action_batch(S, pi, self.box, self.eps, self.R, self.W)

    def jacobian(self, S, pi) -> np.ndarray:
        return gctc_jacobian_batch(S, pi, self.box, self.eps, self.R, self.W)


def critic_inputs(S, A, config: TrainerConfig, tau_max: float) -> np.ndarray:
    S = np.atleast_2d(S)
    A = np.atleast_2d(A)
    return np.hstack([S / np.asarray(config.state_scale), A / tau_max])


def critic_target(batch: Batch, critics_target, policy_target, config: TrainerConfig,
                  ctx: PolicyContext, rng: np.random.Generator) -> np.ndarray:
    """Clipped double-Q bootstrap targets with target-policy smoothing."""
    a2 = ctx.act(batch.s2, policy_target)
    noise = np.clip(rng.normal(0.0, config.target_sigma, size=a2.shape), -config.target_clip, config.target_clip)
    X2 = critic_inputs(batch.s2, a2 + noise, config, ctx.tau_max)
    q1, _ = mlp.forward_batch(critics_target[0], X2)
    q2, _ = mlp.forward_batch(critics_target[1], X2)
    return batch.r + config.gamma * (1.0 - batch.done) * np.minimum(q1, q2)


def critic_update(batch: Batch, critics, y: np.ndarray, config: TrainerConfig, optimizers,
                  tau_max: float) -> tuple[list, float]:
    """One optimizer step per critic on the mean squared Bellman error.

    Returns the updated critics and the loss averaged over both critics
    (evaluated before the step).
    """
    X = critic_inputs(batch.s, batch.a, config, tau_max)
    n = X.shape[0]
    updated, losses = [], []
    for critic, opt in zip(critics, optimizers):
        q, cache = mlp.forward_batch(critic, X)
        resid = q - y
        loss = float(np.mean(resid ** 2))
        if not math.isfinite(loss):
            raise DivergenceError("non-finite critic loss")
        grads, _ = mlp.backward_batch(critic, cache, 2.0 * resid / n)
        updated.append(critic.with_arrays(opt.step(critic.arrays(), grads.arrays())))
        losses.append(loss)
    return updated, float(np.mean(losses))


def policy_gradient(batch_s: np.ndarray, critic, pi: np.ndarray, config: TrainerConfig,
                    ctx: PolicyContext) -> np.ndarray:
    """Deterministic policy gradient estimate: mean over the batch of J^T grad_a Q."""
    S = np.atleast_2d(batch_s)
    a = ctx.act(S, pi)
    X = critic_inputs(S, a, config, ctx.tau_max)
    _, cache = mlp.forward_batch(critic, X)
    _, dX = mlp.backward_batch(critic, cache, np.ones(S.shape[0]))
    dq_da = dX[:, STATE_DIM:] / ctx.tau_max
    J = ctx.jacobian(S, pi)
    g = np.einsum("ni,nij->j", dq_da, J) / S.shape[0]
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite policy gradient")
    return g


def actor_update(batch: Batch, critic, pi: np.ndarray, config: TrainerConfig, ctx: PolicyContext,
                 optimizer: Adam) -> np.ndarray:
    g = policy_gradient(batch.s, critic, pi, config, ctx)
    return optimizer.step([np.asarray(pi, dtype=float)], [g], ascent=True)[0]


def soft_update(live, target, eta: float):
    """Polyak averaging; accepts arrays or :class:`MlpParams`."""
    if not 0 < eta <= 1:
        raise ValueError("eta must lie in (0, 1]")
    if isinstance(live, mlp.MlpParams):
        return target.with_arrays([eta * a + (1 - eta) * b for a, b in zip(live.arrays(), target.arrays())])
    return eta * np.asarray(live) + (1 - eta) * np.asarray(target)


@dataclass
class Learner:
    """Mutable TD3 state: policy, critics, their targets, optimizers and buffer."""

    config: TrainerConfig
    ctx: PolicyContext
    seed: int
    pi: np.ndarray = field(default_factory=lambda: PolicyParams().as_array())

    def __post_init__(self):
        # independent streams keyed by (seed, stream id[, episode])
        c_seeds = np.random.SeedSequence([self.seed, 0]).generate_state(2)
        dims = (STATE_DIM + ACTION_DIM, *self.config.critic_hidden, 1)
        self.critics = [mlp.init(int(c_seeds[0]), dims), mlp.init(int(c_seeds[1]), dims)]
        self.targets = list(self.critics)
        self.pi = np.asarray(self.pi, dtype=float).copy()
        self.pi_target = self.pi.copy()
        self.critic_opts = [Adam(self.config.critic_lr), Adam(self.config.critic_lr)]
        self.actor_opt = Adam(self.config.actor_lr)
        self.buffer = ReplayBuffer(self.config.buffer_capacity, np.random.default_rng([self.seed, 1]))
        self.target_rng = np.random.default_rng([self.seed, 2])
        self.steps = 0
        self.critic_updates = 0
        self.actor_updates = 0
        self.last_loss = math.nan

    def episode_rngs(self, episode: int) -> tuple[np.random.Generator, np.random.Generator]:
        """Independent (exploration, start-state) generators for one episode."""
        return (np.random.default_rng([self.seed, 3, episode]),
                np.random.default_rng([self.seed, 4, episode]))

    def physical(self) -> np.ndarray:
        sigma, cV, cD = constrain_params(self.pi, self.ctx.box)
        return np.array([*sigma, cV, cD])

    def observe(self, tr: Transition):
        """Store a transition and run the per-step TD3 updates."""
        cfg = self.config
        self.buffer.add(tr)
        self.steps += 1
        if self.steps <= cfg.warmup_steps or len(self.buffer) < cfg.batch_size:
            return
        batch = self.buffer.sample(cfg.batch_size)
        y = critic_target(batch, self.targets, self.pi_target, cfg, self.ctx, self.target_rng)
        self.critics, self.last_loss = critic_update(batch, self.critics, y, cfg, self.critic_opts, self.ctx.tau_max)
        self.critic_updates += 1
        if self.critic_updates % cfg.policy_delay == 0:
            self.pi = actor_update(batch, self.critics[0], self.pi, cfg, self.ctx, self.actor_opt)
            self.actor_updates += 1
            if not self.ctx.box.contains(self.physical()):
                raise DivergenceError("learned physical parameters left the constraint box")
            self.targets = [soft_update(c, t, cfg.eta) for c, t in zip(self.critics, self.targets)]
            self.pi_target = soft_update(self.pi, self.pi_target, cfg.eta)


def run_episode(env: TrackingEnv, policy, config: TrainerConfig, ctx: PolicyContext, explore: bool,
                rng_seed=None, learner: Learner | None = None, start_rng=None,
                on_step: Callable | None = None) -> tuple[list, float, str]:
    """Roll one episode; with ``learner`` the policy is read from it and updated every step.

    ``rng_seed`` seeds the exploration noise (an int or a Generator);
    ``start_rng`` draws the perturbed initial posture.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    He = np.asarray(config.He)
    Hu = np.asarray(config.Hu)
    s = env.reset(start_rng)
    transitions = []
    total = 0.0
    while True:
        pi = learner.pi if learner is not None else (policy.as_array() if isinstance(policy, PolicyParams) else policy)
        a = ctx.act(s.vector, pi)[0]
        if explore:
            a = a + rng.normal(0.0, config.explore_sigma, size=ACTION_DIM)
        u = clip_torque(a, ctx.tau_max)
        s2, terminal, reason = env.step(u)
        r = reward(s, u, He, Hu)
        tr = Transition(s.vector, a, r, s2.vector, terminal)
        transitions.append(tr)
        total += r
        if learner is not None:
            learner.observe(tr)
        if on_step is not None:
            on_step(env.t, r, learner)
        s = s2
        if reason is not None:
            return transitions, total, reason


def make_env(plant: PlantParams, spec: TrajectorySpec, config: TrainerConfig) -> TrackingEnv:
    return TrackingEnv(plant, spec, dt=config.plant_dt, control_period=config.control_period,
                       max_track_error=config.max_track_error, max_episode_len=config.max_episode_len,
                       pos_sigma=config.start_pos_sigma, heading_sigma=config.start_heading_sigma)


def train(config: TrainerConfig, plant: PlantParams, trajectory: TrajectorySpec, seed: int,
          box: ConstraintBox, eps: float = DEFAULT_EPS, initial=None,
          step_log: list | None = None) -> tuple[PolicyParams, list[dict], Learner]:
    """Run the full training protocol.

    Returns the learned policy, one summary dict per episode and the learner
    (critics included, for checkpointing).  When ``step_log`` is a list, one
    row per control step (``LOG_COLUMNS``) is appended to it.
    """
    ctx = PolicyContext(box, eps, plant.R, plant.W, plant.tau_max)
    pi0 = PolicyParams() if initial is None else initial
    learner = Learner(config, ctx, seed, pi0.as_array() if isinstance(pi0, PolicyParams) else pi0)
    env = make_env(plant, trajectory, config)
    log = []
    for episode in range(config.episodes):
        explore_rng, start_rng = learner.episode_rngs(episode)
        losses = []

        def on_step(t, r, lrn):
            losses.append(lrn.last_loss)
            if step_log is not None:
                step_log.append((t, episode, r, lrn.last_loss, *lrn.pi))

        try:
            transitions, total, reason = run_episode(env, None, config, ctx, True, explore_rng, learner,
                                                     start_rng, on_step)
        except DivergenceError as exc:
            raise DivergenceError(str(exc), episode) from None
        sigma_hat = learner.physical()
        finite_losses = [v for v in losses if math.isfinite(v)]
        log.append({
            "episode": episode,
            "steps": len(transitions),
            "cumulative_reward": total,
            "termination": reason,
            "mean_loss": float(np.mean(finite_losses)) if finite_losses else None,
            "sigma": sigma_hat[:4].tolist(),
            "cV": float(sigma_hat[4]),
            "cD": float(sigma_hat[5]),
            "alpha": float(learner.pi[6]),
            "beta": float(learner.pi[7]),
            "critic_updates": learner.critic_updates,
            "actor_updates": learner.actor_updates,
        })
    return PolicyParams.from_array(learner.pi), log, learner
