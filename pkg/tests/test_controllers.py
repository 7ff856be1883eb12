import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gctc import controllers as ctl
from gctc.controllers import (
    ConstraintBox, GainSet, PidGains, PidState, PolicyParams, TrackingErrorState,
)
from gctc.dynamics import PlantParams, SigmaParams, sigma_from_c
from gctc.errors import ConfigError
from gctc.observation import AgentState

P = PlantParams()
SIGMA = sigma_from_c(P)
BOX = ConstraintBox()


def random_agent_states(rng, n):
    S = rng.normal(size=(n, 16)) * np.r_[[0.2] * 3, [0.1] * 3, [0.3] * 3, [1.0, 1.0, 1.0], [1.0] * 3, [2.0]]
    return S


# ---------------------------------------------------------------- kinematic controller

@pytest.mark.parametrize("p,p_d,expected", [
    ((1, 2, 0.3), (1, 2, 0.3), (0, 0, 0)),
    ((0, 0, 0), (1, 2, 0), (1, 2, 0)),
    ((0, 0, math.pi / 2), (1, 0, math.pi / 2), (0, -1, 0)),
])
def test_body_frame_error(p, p_d, expected):
    np.testing.assert_allclose(ctl.body_frame_error(p, p_d), expected, atol=1e-15)


def test_body_frame_error_wraps_heading():
    assert ctl.body_frame_error((0, 0, 0), (0, 0, 2 * math.pi + 0.1))[2] == pytest.approx(0.1)


@given(st.floats(-1e4, 1e4))
def test_wrap_angle_range(a):
    w = ctl.wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.cos(w) == pytest.approx(math.cos(a), abs=1e-9)


def test_kinematic_law_examples():
    assert ctl.kinematic_law((0, 0, 0), 1.3, 0.4, 2, 2, 2) == pytest.approx((1.3, 0.4))
    assert ctl.kinematic_law((0, 1, 0), 1.0, 0.4, 2, 2, 2)[1] == pytest.approx(2.4)
    limit = ctl.kinematic_law((0.1, 0.2, 0.0), 1.0, 0.4, 2, 2, 2)
    near = ctl.kinematic_law((0.1, 0.2, 1e-12), 1.0, 0.4, 2, 2, 2)
    assert near == pytest.approx(limit, abs=1e-11)
    with pytest.raises(ValueError):
        ctl.kinematic_law((0, 0, 0), 1.0, 0.0, 0.0, 2, 2)


@given(st.floats(-3, 3))
def test_sinc_matches_definition(x):
    expected = 1.0 if x == 0 else math.sin(x) / x
    assert ctl.sinc(x) == pytest.approx(expected, rel=1e-14, abs=1e-15)


def test_wheel_setpoints():
    assert ctl.wheel_setpoints(1.0, 0.0, 0.1, 0.4) == pytest.approx((10.0, 10.0))
    assert ctl.wheel_setpoints(0.0, 1.0, 0.1, 0.4) == pytest.approx((2.0, -2.0))
    rng = np.random.default_rng(0)
    for v, om in rng.uniform(-3, 3, (100, 2)):
        wR, wL = ctl.wheel_setpoints(v, om, P.R, P.W)
        assert P.R * (wR + wL) / 2 == pytest.approx(v, abs=1e-12)
        assert P.R * (wR - wL) / P.W == pytest.approx(om, abs=1e-12)


def test_pid_examples():
    g = PidGains()
    assert ctl.pid_wheel_step(3.0, 3.0, PidState(), 1e-3, g)[0] == 0.0
    p_only = PidGains(kp=1.0, ki=0.0, kd=0.0)
    assert ctl.pid_wheel_step(0.5, 0.0, PidState(), 1e-3, p_only)[0] == pytest.approx(0.5)
    i_only = PidGains(kp=0.0, ki=1.0, kd=0.0, integral_limit=0.25)
    state = PidState()
    for n in range(1, 41):
        torque, state = ctl.pid_wheel_step(1.0, 0.0, state, 0.01, i_only)
        assert torque == pytest.approx(min(n * 0.01, 0.25))


def test_pid_output_clipped():
    torque, _ = ctl.pid_wheel_step(1e6, 0.0, PidState(), 1e-3, PidGains(tau_max=5.0))
    assert torque == 5.0


# ---------------------------------------------------------------- gains and poles

def test_gain_example():
    g = ctl.gains_from_poles(0.0, 0.0, eps=1.0)
    assert (g.kp, g.ki, g.kd) == (3.0, 1.0, 3.0)


def test_triple_root_numeric():
    roots = np.roots([1, 3 * 2.5, 3 * 2.5 ** 2, 2.5 ** 3])
    # a triple root is ill-conditioned for root finders; the mean is well-conditioned
    assert np.mean(roots).real == pytest.approx(-2.5, abs=1e-9)
    assert np.max(np.abs(roots + 2.5)) < 1e-4


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_gains_even_in_alpha_and_beta(alpha, beta):
    assert ctl.gains_from_poles(alpha, beta) == ctl.gains_from_poles(-alpha, -beta)


@given(st.floats(-4, 4), st.floats(-4, 4))
def test_characteristic_polynomial_is_a_perfect_cube(alpha, beta):
    g = ctl.gains_from_poles(alpha, beta)
    for a, (kp, ki, kd) in ((alpha ** 2 + 0.01, (g.kp, g.ki, g.kd)), (beta ** 2 + 0.01, (g.kp_h, g.ki_h, g.kd_h))):
        np.testing.assert_allclose([1, kd, kp, ki], np.poly([-a, -a, -a]), rtol=1e-12)


def test_gain_set_requires_positive_entries():
    with pytest.raises(ValueError):
        GainSet(1, 1, 1, 1, 0, 1)
    with pytest.raises(ValueError):
        ctl.gains_from_poles(1.0, 1.0, eps=0.0)


def test_triple_pole_modal_dominance():
    # distinct poles {-1,-2,-4} with every mode excited vs. a triple pole at -4
    t = np.arange(0.0, 100.0 + 5e-4, 1e-3)
    poles = np.array([-1.0, -2.0, -4.0])
    x0 = np.array([1.0, 0.0, 0.0])  # x, x', x''
    coeffs = np.linalg.solve(np.vander(poles, 3, increasing=True).T, x0)
    assert np.all(np.abs(coeffs) > 0.1)
    x = (coeffs[None, :] * np.exp(np.outer(t, poles))).sum(axis=1)
    # x* = (c0 + c1 t + c2 t^2) e^{-4t} with the same initial values
    a = 4.0
    c0 = x0[0]
    c1 = x0[1] + a * c0
    c2 = (x0[2] + 2 * a * c1 - a * a * c0) / 2
    x_star = (c0 + c1 * t + c2 * t * t) * np.exp(-a * t)
    dominated = np.abs(x_star) < np.abs(x)
    violations = np.nonzero(~dominated)[0]
    t_prime = t[violations[-1] + 1] if len(violations) else 0.0
    assert t_prime <= 50.0
    assert np.all(dominated[t >= t_prime])


def test_triple_pole_response_solves_the_error_ode():
    from scipy.integrate import solve_ivp

    a, e0, ed0, ei0 = 1.7, 0.3, -0.2, 0.05
    sol = solve_ivp(lambda t, z: [z[1], z[2], -3 * a * z[2] - 3 * a * a * z[1] - a ** 3 * z[0]],
                    (0, 5), [ei0, e0, ed0], rtol=1e-12, atol=1e-14, dense_output=True)
    t = np.linspace(0, 5, 101)
    np.testing.assert_allclose(ctl.triple_pole_response(a, e0, ed0, ei0, t), sol.sol(t)[1], atol=1e-10)


# ---------------------------------------------------------------- constraint box

def test_box_validation():
    with pytest.raises(ConfigError):
        ConstraintBox(radii=(0.15, 0.03, 0.016, 0.006, 0.025, -0.1))
    with pytest.raises(ConfigError):
        ConstraintBox(centers=(0.1, 0.04, 0.026, 0.008, 0.03, 0.015), radii=(0.15, 0.03, 0.016, 0.006, 0.025, 0.012))
    with pytest.raises(ConfigError):
        ConstraintBox(centers=(0.3,) * 5)


def test_true_parameters_inside_default_box():
    assert BOX.contains([*SIGMA, P.cV, P.cD])


def test_constrain_params_examples():
    sigma, cV, cD = ctl.constrain_params(np.zeros(8), BOX)
    assert [*sigma, cV, cD] == list(BOX.centers)
    sigma, cV, cD = ctl.constrain_params(np.full(8, 20.0), BOX)
    np.testing.assert_allclose([*sigma, cV, cD], BOX.upper, atol=1e-9)


def test_constrain_params_strictly_increasing():
    rng = np.random.default_rng(1)
    h = 1e-6
    for z in rng.normal(size=(100, 8)) * 2:
        base = np.array([*ctl.constrain_params(z, BOX)[0], *ctl.constrain_params(z, BOX)[1:]])
        for i in range(6):
            dz = z.copy()
            dz[i] += h
            bumped = ctl.constrain_params(dz, BOX)
            assert np.array([*bumped[0], *bumped[1:]])[i] > base[i]


@given(st.lists(st.floats(-1e6, 1e6), min_size=8, max_size=8))
def test_constrained_values_stay_inside_closed_box(z):
    sigma, cV, cD = ctl.constrain_params(np.array(z), BOX)
    v = np.array([*sigma, cV, cD])
    assert np.all(v >= BOX.lower) and np.all(v <= BOX.upper)
    assert np.all(v > 0)


@given(st.lists(st.floats(-15, 15), min_size=6, max_size=6))
def test_constrained_values_strictly_inside_for_moderate_z(z):
    # beyond |z| ~ 19 tanh rounds to exactly 1 in double precision
    sigma, cV, cD = ctl.constrain_params(np.array(z + [1.0, 1.0]), BOX)
    assert BOX.contains([*sigma, cV, cD])


def test_policy_params_round_trip():
    pi = PolicyParams(0.1, -0.2, 0.3, -0.4, 0.5, -0.6, 1.5, 0.7)
    assert PolicyParams.from_array(pi.as_array()) == pi
    with pytest.raises(ValueError):
        PolicyParams(alpha=math.nan)


# ---------------------------------------------------------------- computed torque

def test_m_matrix_and_c_vector():
    s = SigmaParams(1.0, 2.0, 3.0, 4.0)
    np.testing.assert_allclose(ctl.m_matrix(0.0, s), [[1, 2, 3], [1, -2, -3]])
    th = 0.7
    c, sn = math.cos(th), math.sin(th)
    np.testing.assert_allclose(ctl.m_matrix(th, s), [[c - 2 * sn, sn + 2 * c, 3], [c + 2 * sn, sn - 2 * c, -3]])
    assert tuple(ctl.c_vector(0.0, 4.0)) == (0.0, 0.0)
    np.testing.assert_allclose(ctl.c_vector(2.0, 0.5), [-2.0, -2.0])


def _err(e, ei, ed):
    return TrackingErrorState(np.array(e, float), np.array(ei, float), np.array(ed, float))


def test_ctc_zero_at_rest_with_zero_error():
    g = ctl.gains_from_poles(1, 1)
    u = ctl.ctc_torque(_err([0, 0, 0], [0, 0, 0], [0, 0, 0]), [0, 0, 0], 0.3, [0, 0, 0], SIGMA, P.cV, P.cD, g, P.R, P.W)
    assert tuple(u) == (0.0, 0.0)


def test_ctc_linear_in_proportional_term():
    g = ctl.gains_from_poles(1, 1)
    pdot = [0.5, 0.2, 0.1]
    zero = np.array(ctl.ctc_torque(_err([0] * 3, [0] * 3, [0] * 3), [0, 0, 0], 0.3, pdot, SIGMA, P.cV, P.cD, g, P.R, P.W))
    one = np.array(ctl.ctc_torque(_err([0.1, 0.2, 0.05], [0] * 3, [0] * 3), [0, 0, 0], 0.3, pdot, SIGMA, P.cV, P.cD, g, P.R, P.W))
    two = np.array(ctl.ctc_torque(_err([0.2, 0.4, 0.1], [0] * 3, [0] * 3), [0, 0, 0], 0.3, pdot, SIGMA, P.cV, P.cD, g, P.R, P.W))
    np.testing.assert_allclose(two - zero, 2 * (one - zero), rtol=1e-12)


def test_gctc_at_true_parameters_equals_exact_ctc():
    rng = np.random.default_rng(2)
    pi = ctl.policy_for_exact(SIGMA, P.cV, P.cD, 1.3, 0.8, BOX)
    g = ctl.gains_from_poles(1.3, 0.8)
    for s in random_agent_states(rng, 100):
        st_ = AgentState(s)
        expected = ctl.ctc_torque(_err(st_.e, st_.e_int, st_.e_dot), st_.pddot_d, st_.theta, st_.rates,
                                  SIGMA, P.cV, P.cD, g, P.R, P.W)
        np.testing.assert_allclose(ctl.gctc_action(st_, pi, BOX, 0.01, P.R, P.W), expected, rtol=1e-12, atol=1e-12)


def test_gctc_zero_at_rest():
    u = ctl.gctc_action(np.zeros(16), PolicyParams(), BOX, 0.01, P.R, P.W)
    assert tuple(u) == (0.0, 0.0)


def test_batch_action_matches_single():
    rng = np.random.default_rng(3)
    S = random_agent_states(rng, 20)
    pi = rng.normal(size=8)
    batch = ctl.gctc_action_batch(S, pi, BOX, 0.01, P.R, P.W)
    for s, u in zip(S, batch):
        np.testing.assert_allclose(ctl.gctc_action(s, pi, BOX, 0.01, P.R, P.W), u, rtol=1e-14)


def _fd_jacobian(s, pi, h=1e-6):
    J = np.zeros((2, 8))
    for i in range(8):
        d = np.zeros(8)
        d[i] = h
        up = np.array(ctl.gctc_action(s, pi + d, BOX, 0.01, P.R, P.W))
        dn = np.array(ctl.gctc_action(s, pi - d, BOX, 0.01, P.R, P.W))
        J[:, i] = (up - dn) / (2 * h)
    return J


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    for s in random_agent_states(rng, 100):
        pi = np.r_[rng.normal(size=6), rng.uniform(0.3, 2.5, 2) * rng.choice([-1, 1], 2)]
        J = ctl.gctc_jacobian(s, pi, BOX, 0.01, P.R, P.W)
        fd = _fd_jacobian(s, pi)
        assert np.abs(J - fd).max() / max(np.abs(fd).max(), 1e-12) < 1e-5


def test_jacobian_special_cases():
    s = np.zeros(16)
    s[9:12] = [0.5, 0.3, 0.2]
    s[12:15] = [0.1, -0.2, 0.3]
    J = ctl.gctc_jacobian(s, PolicyParams(), BOX, 0.01, P.R, P.W)
    np.testing.assert_allclose(J[:, 6:], 0.0, atol=1e-15)
    Js = ctl.gctc_jacobian(s, np.r_[np.full(6, 20.0), 1.0, 1.0], BOX, 0.01, P.R, P.W)
    np.testing.assert_allclose(Js[:, :6], 0.0, atol=1e-12)


def test_error_tracker_clamps_integral():
    tr = ctl.ErrorTracker(limit=0.5)
    for _ in range(100):
        tr.accumulate(np.array([1.0, -1.0, 0.1]), 0.01)
    np.testing.assert_allclose(tr.integral, [0.5, -0.5, 0.1])
    tr.reset()
    assert np.all(tr.integral == 0)


def test_exact_controller_factory_uses_true_constants():
    c = ctl.ComputedTorqueController.exact(P, 1.0, 2.0)
    assert c.sigma == SIGMA and c.cV == P.cV and c.cD == P.cD
    assert c.gains == ctl.gains_from_poles(1.0, 2.0)


def test_kinematic_controller_tracks_training_path():
    from gctc.simulation import rollout, start_state
    from gctc.trajectories import default_suite

    train, _ = default_suite()
    ctrl = ctl.KinematicController(ctl.KinematicGains(), P)
    rows = np.array(rollout(P, train, ctrl, 5.0, start_state(train, P)))
    err = np.hypot(rows[:, 1] - rows[:, 4], rows[:, 2] - rows[:, 5])
    assert err.max() < 0.05
    assert np.all(np.abs(rows[:, 7:9]) <= P.tau_max)


def test_gray_box_controller_at_truth_matches_exact_controller():
    from gctc.simulation import rollout, start_state
    from gctc.trajectories import default_suite

    train, _ = default_suite()
    start = start_state(train, P, np.random.default_rng(0), 0.03, 0.03)
    exact = ctl.ComputedTorqueController.exact(P, 1.0, 1.0)
    gray = ctl.GrayBoxController(ctl.policy_for_exact(SIGMA, P.cV, P.cD, 1.0, 1.0, BOX), BOX, 0.01, P)
    a = np.array(rollout(P, train, exact, 3.0, start))
    b = np.array(rollout(P, train, gray, 3.0, start))
    np.testing.assert_allclose(a, b, atol=1e-9, equal_nan=True)


def test_dataclass_defaults_are_frozen():
    with pytest.raises(dataclasses.FrozenInstanceError):
        BOX.centers = (1,) * 6


def test_exact_ctc_follows_triple_pole_response_on_straight_path():
    # along a straight path with a longitudinal offset the nonholonomic coupling
    # is inactive, so the analytic closed-loop response applies per component
    from gctc.dynamics import consistent_state
    from gctc.simulation import rollout
    from gctc.trajectories import Sinusoid, sample

    line = Sinusoid(1.0, 1e-300, 4.0)
    s0 = sample(line, 0.0)
    robot = consistent_state(np.array(s0.p_d) + [0.05, 0.0, 0.0], s0.v_d, s0.omega_d, (0.0, 0.0), P)
    ctrl = ctl.ComputedTorqueController.exact(P, 1.0, 1.0, period=1e-3)
    rows = np.array(rollout(P, line, ctrl, 5.0, robot, log_period=1e-3))
    t = rows[:, 0]
    e = rows[:, 4] - rows[:, 1]
    ref = ctl.triple_pole_response(1.0 + ctl.DEFAULT_EPS, e[0], 0.0, 0.0, t)
    assert np.sqrt(np.trapezoid((e - ref) ** 2, t) / np.trapezoid(ref ** 2, t)) < 0.02
    sgn = np.sign(e[np.abs(e) > 1e-12])
    assert np.sum(sgn[1:] != sgn[:-1]) <= 1
