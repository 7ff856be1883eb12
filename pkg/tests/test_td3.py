import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gctc import approximator as mlp
from gctc import td3
from gctc.controllers import ConstraintBox, PolicyParams, policy_for_exact
from gctc.dynamics import PlantParams, sigma_from_c
from gctc.errors import ConfigError, DivergenceError
from gctc.observation import AgentState, assemble_state
from gctc.trajectories import default_suite

P = PlantParams()
BOX = ConstraintBox()
TRAIN, _ = default_suite()
CFG = td3.TrainerConfig()
CTX = td3.PolicyContext(BOX, 0.01, P.R, P.W, P.tau_max)


def _batch(n, rng, done=None):
    S = rng.normal(size=(n, 16)) * 0.1
    S2 = rng.normal(size=(n, 16)) * 0.1
    return td3.Batch(S, rng.normal(size=(n, 2)), rng.uniform(0.1, 1, n), S2,
                     np.zeros(n) if done is None else np.asarray(done, float))


def _critics(seed=0):
    dims = (18, 16, 16, 1)
    return [mlp.init(seed, dims, final_bound=0.3), mlp.init(seed + 1, dims, final_bound=0.3)]


# ---------------------------------------------------------------- state and reward

def test_assemble_state_layout():
    from gctc.controllers import TrackingErrorState
    from gctc.dynamics import consistent_state

    robot = consistent_state((1.0, 2.0, 7.0), 0.5, 0.1, params=P)
    err = TrackingErrorState(np.array([1., 2, 3]), np.array([4., 5, 6]), np.array([7., 8, 9]))
    s = assemble_state(robot, err, (10., 11, 12))
    assert s.vector.shape == (16,)
    np.testing.assert_array_equal(s.vector[:9], np.arange(1, 10))
    np.testing.assert_array_equal(s.vector[12:15], [10, 11, 12])
    assert s.theta == 7.0  # not wrapped
    back = AgentState.pack(*s.unpack())
    np.testing.assert_array_equal(back.vector, s.vector)


def test_assemble_state_zero_on_straight_path():
    from gctc.controllers import ErrorTracker
    from gctc.dynamics import consistent_state
    from gctc.trajectories import Sinusoid, sample

    line = Sinusoid(1.0, 1e-300, 4.0)
    ref = sample(line, 0.0)
    robot = consistent_state(ref.p_d, ref.v_d, 0.0, params=P)
    err = ErrorTracker().current(robot.posture, robot.chassis_rates, ref)
    s = assemble_state(robot, err, ref.pddot_d)
    assert np.all(s.vector[:9] == 0)
    np.testing.assert_allclose(s.vector[12:15], 0.0, atol=1e-290)


def test_reward_examples():
    He, Hu = np.eye(9), np.eye(2)
    assert td3.reward(np.zeros(16), (0.0, 0.0), He, Hu) == 1.0
    s = np.zeros(16)
    s[0] = 1.0
    assert td3.reward(s, (0.0, 0.0), He, Hu) == pytest.approx(1 / math.cosh(1.0))
    assert td3.reward(s, (0.0, 0.0), He, Hu) == pytest.approx(0.648054, abs=1e-6)


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 100))
def test_reward_monotone_along_torque_rays(u1, u2, scale):
    He, Hu = np.asarray(CFG.He), np.asarray(CFG.Hu)
    s = np.zeros(16)
    s[0] = 0.1
    r1 = td3.reward(s, (u1, u2), He, Hu)
    r2 = td3.reward(s, (u1 * (1 + scale), u2 * (1 + scale)), He, Hu)
    assert 0 < r2 <= r1 <= 1


@given(st.lists(st.floats(-1e6, 1e6), min_size=16, max_size=16), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_reward_in_unit_interval(s, u1, u2):
    r = td3.reward(np.array(s), (u1, u2), np.asarray(CFG.He), np.asarray(CFG.Hu))
    assert 0 < r <= 1


# ---------------------------------------------------------------- config

@pytest.mark.parametrize("changes", [
    {"gamma": 1.0}, {"gamma": 0.0}, {"eta": 0.0}, {"eta": 1.5}, {"policy_delay": 0},
    {"He": -np.eye(9)}, {"Hu": np.zeros((2, 2))}, {"He": np.eye(3)},
    {"He": np.triu(np.ones((9, 9)))}, {"actor_lr": 0.0},
])
def test_trainer_config_rejects_invalid(changes):
    with pytest.raises(ConfigError):
        dataclasses.replace(CFG, **changes)


def test_default_weight_matrices_are_valid():
    assert np.linalg.eigvalsh(np.asarray(CFG.He)).min() >= 0
    assert np.linalg.eigvalsh(np.asarray(CFG.Hu)).min() > 0


# ---------------------------------------------------------------- replay buffer

def test_replay_buffer_fifo_and_uniform():
    buf = td3.ReplayBuffer(100, np.random.default_rng(0))
    for i in range(150):
        buf.add(td3.Transition(np.full(16, i), np.zeros(2), 0.5, np.zeros(16), False))
    assert len(buf) == 100
    assert set(buf._s[:, 0].astype(int)) == set(range(50, 150))
    counts = np.bincount(buf.sample_indices(100_000), minlength=100)
    expected = 1000
    sd = math.sqrt(100_000 * 0.01 * 0.99)
    assert np.all(np.abs(counts - expected) < 5 * sd)


def test_replay_buffer_deterministic():
    def draw():
        buf = td3.ReplayBuffer(10, np.random.default_rng(3))
        for i in range(10):
            buf.add(td3.Transition(np.full(16, i), np.zeros(2), 0.5, np.zeros(16), False))
        return buf.sample(5).s[:, 0]
    np.testing.assert_array_equal(draw(), draw())
    with pytest.raises(ValueError):
        td3.ReplayBuffer(5, np.random.default_rng(0)).sample(1)


# ---------------------------------------------------------------- targets and critic updates

def test_critic_target_arithmetic_and_terminal_cut():
    cfg = dataclasses.replace(CFG, gamma=0.99, target_sigma=1e-9, target_clip=1e-9)
    # linear critics with zero weights and bias 2 give Q' = 2 everywhere
    const = mlp.MlpParams((18, 1), (np.zeros((18, 1)),), (np.array([2.0]),), ())
    rng = np.random.default_rng(0)
    b = _batch(4, rng, done=[0, 1, 0, 1])
    b = b._replace(r=np.ones(4))
    y = td3.critic_target(b, [const, const], PolicyParams().as_array(), cfg, CTX, rng)
    np.testing.assert_allclose(y, [2.98, 1.0, 2.98, 1.0])


def test_critic_target_uses_min_of_twins():
    rng = np.random.default_rng(1)
    critics = _critics()
    b = _batch(32, rng)
    y = td3.critic_target(b, critics, PolicyParams().as_array(), CFG, CTX, np.random.default_rng(5))
    for c in critics:
        single = td3.critic_target(b, [c, c], PolicyParams().as_array(), CFG, CTX, np.random.default_rng(5))
        assert np.all(y <= single + 1e-15)


def test_critic_update_zero_when_fitted():
    rng = np.random.default_rng(2)
    critics = _critics()
    b = _batch(16, rng)
    X = td3.critic_inputs(b.s, b.a, CFG, P.tau_max)
    y = mlp.forward_batch(critics[0], X)[0]
    new, loss = td3.critic_update(b, [critics[0], critics[0]], y, CFG, [td3.Adam(1e-3), td3.Adam(1e-3)], P.tau_max)
    assert loss == 0.0
    for a, c in zip(new[0].arrays(), critics[0].arrays()):
        np.testing.assert_array_equal(a, c)


def test_critic_loss_decreases_on_frozen_batch():
    rng = np.random.default_rng(3)
    critics = _critics()
    b = _batch(64, rng)
    y = rng.uniform(0, 5, 64)
    opts = [td3.Adam(1e-3), td3.Adam(1e-3)]
    losses = []
    for _ in range(100):
        critics, loss = td3.critic_update(b, critics, y, CFG, opts, P.tau_max)
        losses.append(loss)
    assert losses[-1] < 0.5 * losses[0]
    # monotone trend: each block of 10 is below the previous one
    blocks = np.mean(np.reshape(losses, (10, 10)), axis=1)
    assert np.all(np.diff(blocks) < 0)
    assert opts[0].t == opts[1].t == 100


def test_critic_update_flags_non_finite_loss():
    rng = np.random.default_rng(4)
    b = _batch(4, rng)
    with pytest.raises(DivergenceError):
        td3.critic_update(b, _critics(), np.full(4, np.inf), CFG, [td3.Adam(1e-3), td3.Adam(1e-3)], P.tau_max)


# ---------------------------------------------------------------- actor update

def _q_of_pi(critic, s, pi):
    a = CTX.act(s[None, :], pi)
    return mlp.forward_batch(critic, td3.critic_inputs(s[None, :], a, CFG, P.tau_max))[0][0]


def test_policy_gradient_matches_chain_rule_finite_differences():
    rng = np.random.default_rng(5)
    h = 1e-6
    worst = 0.0
    for case in range(100):
        critic = mlp.init(case, (18, 16, 16, 1), "tanh", final_bound=1.0)
        s = rng.normal(size=16) * np.r_[[0.1] * 9, [1.0] * 6, [2.0]]
        pi = np.r_[rng.normal(size=6), rng.uniform(0.3, 2.0, 2)]
        g = td3.policy_gradient(s[None, :], critic, pi, CFG, CTX)
        fd = np.array([(_q_of_pi(critic, s, pi + h * np.eye(8)[i]) - _q_of_pi(critic, s, pi - h * np.eye(8)[i])) / (2 * h)
                       for i in range(8)])
        worst = max(worst, np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-10))
    assert worst < 1e-4


def test_policy_gradient_of_identical_batch_equals_single():
    rng = np.random.default_rng(6)
    critic = _critics()[0]
    s = rng.normal(size=16) * 0.1
    pi = PolicyParams().as_array()
    single = td3.policy_gradient(s[None, :], critic, pi, CFG, CTX)
    batch = td3.policy_gradient(np.tile(s, (8, 1)), critic, pi, CFG, CTX)
    np.testing.assert_allclose(batch, single, rtol=1e-12)


def test_actor_update_unchanged_under_flat_critic():
    flat = mlp.MlpParams((18, 1), (np.zeros((18, 1)),), (np.array([3.0]),), ())
    pi = PolicyParams(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 1.2, 0.9).as_array()
    b = _batch(8, np.random.default_rng(7))
    new = td3.actor_update(b, flat, pi, CFG, CTX, td3.Adam(1e-2))
    np.testing.assert_array_equal(new, pi)


# ---------------------------------------------------------------- soft update

def test_soft_update_examples():
    assert td3.soft_update(np.array(1.0), np.array(0.0), 0.005) == pytest.approx(0.005)
    np.testing.assert_array_equal(td3.soft_update(np.ones(3), np.zeros(3), 1.0), np.ones(3))
    target = np.zeros(2)
    live = np.array([1.0, -2.0])
    gap = np.linalg.norm(target - live)
    for _ in range(20):
        target = td3.soft_update(live, target, 0.1)
        new_gap = np.linalg.norm(target - live)
        assert new_gap == pytest.approx(0.9 * gap, rel=1e-12)
        gap = new_gap
    with pytest.raises(ValueError):
        td3.soft_update(live, target, 0.0)


def test_soft_update_on_networks():
    a, b = _critics()
    c = td3.soft_update(a, b, 0.25)
    for x, y, z in zip(a.arrays(), b.arrays(), c.arrays()):
        np.testing.assert_allclose(z, 0.25 * x + 0.75 * y)


# ---------------------------------------------------------------- episodes and training

def test_episode_step_count_without_cutoff():
    cfg = dataclasses.replace(CFG, max_track_error=math.inf)
    env = td3.make_env(P, TRAIN, cfg)
    tr, total, reason = td3.run_episode(env, PolicyParams(), cfg, CTX, True, 0, start_rng=np.random.default_rng(0))
    assert len(tr) == 500 and reason == "time_limit"
    assert all(0 < t.r <= 1 for t in tr)
    assert total == pytest.approx(sum(t.r for t in tr))
    assert not any(t.done for t in tr)


def test_exact_policy_reaches_time_limit():
    pi = policy_for_exact(sigma_from_c(P), P.cV, P.cD, 1.0, 1.0, BOX)
    env = td3.make_env(P, TRAIN, CFG)
    _, _, reason = td3.run_episode(env, pi, CFG, CTX, False, start_rng=np.random.default_rng(1))
    assert reason == "time_limit"


def test_tracking_cutoff_is_terminal():
    cfg = dataclasses.replace(CFG, max_track_error=0.01)
    env = td3.make_env(P, TRAIN, cfg)
    # a weak, badly biased policy drifts off the path
    tr, _, reason = td3.run_episode(env, PolicyParams(alpha=0.0, beta=0.0), cfg, CTX, True, 1,
                                    start_rng=np.random.default_rng(2))
    assert reason == "track_error"
    assert tr[-1].done and not any(t.done for t in tr[:-1])


def test_zero_episodes_returns_initial_policy():
    cfg = dataclasses.replace(CFG, episodes=0)
    pi, log, _ = td3.train(cfg, P, TRAIN, 0, BOX)
    assert pi == PolicyParams() and log == []


@pytest.fixture(scope="module")
def short_run():
    cfg = dataclasses.replace(CFG, episodes=3)
    steps = []
    pi, log, learner = td3.train(cfg, P, TRAIN, 0, BOX, step_log=steps)
    return cfg, pi, log, learner, steps


def test_training_is_deterministic(short_run):
    cfg, pi, log, _, steps = short_run
    steps2 = []
    pi2, log2, _ = td3.train(cfg, P, TRAIN, 0, BOX, step_log=steps2)
    assert pi2 == pi and log2 == log
    assert np.array_equal(np.array(steps2, dtype=float), np.array(steps, dtype=float), equal_nan=True)


def test_policy_delay_bookkeeping(short_run):
    cfg, _, _, learner, _ = short_run
    assert learner.critic_updates == learner.steps - cfg.warmup_steps
    assert abs(learner.actor_updates - learner.critic_updates // cfg.policy_delay) <= 1


def test_training_log_contents(short_run):
    cfg, pi, log, learner, steps = short_run
    assert [e["episode"] for e in log] == [0, 1, 2]
    assert sum(e["steps"] for e in log) == len(steps) == learner.steps
    for row in steps:
        assert 0 < row[2] <= 1
        assert len(row) == len(td3.LOG_COLUMNS)
    assert log[-1]["alpha"] == pi.alpha
    phys = [*log[-1]["sigma"], log[-1]["cV"], log[-1]["cD"]]
    assert BOX.contains(phys)
