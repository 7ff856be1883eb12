"""
Tracking control laws for the differential-drive robot.

* ``kinematic_law`` / ``wheel_setpoints`` / ``pid_wheel_step``: the Lyapunov
  kinematic controller with low-level wheel-rate PID loops.
* ``ctc_torque``: computed-torque law with friction compensation.
* ``gctc_action`` / ``gctc_jacobian``: the same law driven by the eight
  trainable policy parameters, and its exact parameter Jacobian.

Everything operating on agent states accepts either a single 16-vector or a
batch of shape ``(N, 16)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import OMEGA_EPS, PlantParams, SigmaParams, WheelTorques, kinematic_maps, sgn_deadband, sigma_from_c
from .errors import ConfigError
from .observation import AgentState, E, E_DOT, E_INT, PDDOT_D, RATES, THETA

#: per-channel bound on the integrated tracking error
INTEGRAL_LIMIT = 10.0
DEFAULT_EPS = 0.01


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


# --------------------------------------------------------------------------
# Kinematic controller
# --------------------------------------------------------------------------

def body_frame_error(p, p_d) -> np.ndarray:
    x, y, th = (float(v) for v in p)
    dx, dy = float(p_d[0]) - x, float(p_d[1]) - y
    c, s = math.cos(th), math.sin(th)
    return np.array([c * dx + s * dy, -s * dx + c * dy, wrap_angle(float(p_d[2]) - th)])


def sinc(x: float) -> float:
    """Unnormalized sinc, sin(x)/x, continuous at 0."""
    if abs(x) < 1e-8:
        return 1.0 - x * x / 6.0
    return math.sin(x) / x


def kinematic_law(e_tilde, v_d: float, omega_d: float, k1: float, k2: float, k3: float) -> tuple[float, float]:
    if min(k1, k2, k3) <= 0:
        raise ValueError("kinematic gains must be positive")
    e1, e2, e3 = (float(v) for v in e_tilde)
    v = v_d * math.cos(e3) + k1 * e1
    omega = omega_d + k2 * v_d * sinc(e3) * e2 + k3 * e3
    return v, omega


def wheel_setpoints(v: float, omega: float, R: float, W: float) -> tuple[float, float]:
    if R <= 0:
        raise ValueError("R must be positive")
    return (v + W * omega / 2) / R, (v - W * omega / 2) / R


@dataclass(frozen=True)
class PidGains:
    kp: float = 2.0
    ki: float = 5.0
    kd: float = 0.01
    integral_limit: float = 10.0
    tau_max: float = 5.0


@dataclass(frozen=True)
class PidState:
    integral: float = 0.0
    prev_error: float | None = None


def pid_wheel_step(setpoint: float, measured: float, state: PidState, dt: float,
                   gains: PidGains) -> tuple[float, PidState]:
    """One positional PID update on wheel-rate error; returns ``(torque, new_state)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    error = setpoint - measured
    lim = gains.integral_limit
    integral = min(max(state.integral + error * dt, -lim), lim)
    deriv = 0.0 if state.prev_error is None else (error - state.prev_error) / dt
    torque = gains.kp * error + gains.ki * integral + gains.kd * deriv
    torque = min(max(torque, -gains.tau_max), gains.tau_max)
    return torque, PidState(integral, error)


# --------------------------------------------------------------------------
# Gain synthesis and parameter constraints
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GainSet:
    kp: float
    ki: float
    kd: float
    kp_h: float
    ki_h: float
    kd_h: float

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd, self.kp_h, self.ki_h, self.kd_h) <= 0:
            raise ValueError("all gains must be positive")

    def diagonals(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(Kp, Ki, Kd)`` diagonals over the (x, y, theta) channels."""
        return (np.array([self.kp, self.kp, self.kp_h]),
                np.array([self.ki, self.ki, self.ki_h]),
                np.array([self.kd, self.kd, self.kd_h]))


def gains_from_poles(alpha: float, beta: float, eps: float = DEFAULT_EPS) -> GainSet:
    """Gains putting a triple closed-loop pole at ``-(alpha^2+eps)`` (translation) and ``-(beta^2+eps)`` (heading)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    a = alpha * alpha + eps
    b = beta * beta + eps
    return GainSet(kp=3 * a * a, ki=a ** 3, kd=3 * a, kp_h=3 * b * b, ki_h=b ** 3, kd_h=3 * b)


def triple_pole_response(a: float, e0, edot0, eint0, t) -> np.ndarray:
    """Error ``e(t)`` of the triple-pole loop ``e'' + 3a e' + 3a^2 e + a^3 E = 0``, ``E`` the integral of ``e``.

    Works elementwise, so ``e0``/``edot0``/``eint0`` may be per-channel arrays
    (with ``a`` broadcast against them) and ``t`` a column of times.
    """
    t = np.asarray(t, dtype=float)
    A = np.asarray(eint0, dtype=float)
    B = np.asarray(e0, dtype=float) + a * A
    C = (np.asarray(edot0, dtype=float) + 2 * a * B - a * a * A) / 2
    return (B + 2 * C * t - a * (A + B * t + C * t * t)) * np.exp(-a * t)


@dataclass(frozen=True)
class ConstraintBox:
    """Centers and radii of the admissible ranges for (sigma1..4, cV, cD)."""

    centers: tuple = (0.275, 0.045, 0.022, 0.011, 0.024, 0.017)
    radii: tuple = (0.1, 0.02, 0.01, 0.005, 0.012, 0.008)

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float)
        r = np.asarray(self.radii, dtype=float)
        if c.shape != (6,) or r.shape != (6,):
            raise ConfigError("constraint box needs exactly six centers and six radii")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(r))):
            raise ConfigError("constraint box entries must be finite")
        if np.any(r <= 0):
            raise ConfigError("constraint box radii must be positive")
        if np.any(c - r <= 0):
            raise ConfigError("constraint box lower ends (center - radius) must be positive")
        object.__setattr__(self, "centers", tuple(float(v) for v in c))
        object.__setattr__(self, "radii", tuple(float(v) for v in r))

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.centers) - np.asarray(self.radii)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.centers) + np.asarray(self.radii)

    def contains(self, values) -> bool:
        """Strict interior test."""
        v = np.asarray(values, dtype=float)
        return bool(np.all(v > self.lower) and np.all(v < self.upper))

    def z_for(self, values) -> np.ndarray:
        """Inverse of the tanh map; ``values`` must lie strictly inside the box."""
        if not self.contains(values):
            raise ValueError("values lie outside the constraint box")
        return np.arctanh((np.asarray(values, dtype=float) - self.centers) / np.asarray(self.radii))


@dataclass(frozen=True)
class PolicyParams:
    z1: float = 0.0
    z2: float = 0.0
    z3: float = 0.0
    z4: float = 0.0
    zV: float = 0.0
    zD: float = 0.0
    alpha: float = 1.0
    beta: float = 1.0

    NAMES = ("z1", "z2", "z3", "z4", "zV", "zD", "alpha", "beta")

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_array()):
            raise ValueError("policy parameters must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.z1, self.z2, self.z3, self.z4, self.zV, self.zD, self.alpha, self.beta])

    @classmethod
    def from_array(cls, values) -> "PolicyParams":
        values = np.asarray(values, dtype=float).ravel()
        if values.shape != (8,):
            raise ValueError("policy parameter vector must have 8 entries")
        return cls(*(float(v) for v in values))


def constrain_params(z, box: ConstraintBox) -> tuple[SigmaParams, float, float]:
    """Map the six unconstrained ``z`` entries into the box via ``center + radius*tanh(z)``."""
    if isinstance(z, PolicyParams):
        z = z.as_array()
    z = np.asarray(z, dtype=float)[:6]
    vals = np.asarray(box.centers) + np.asarray(box.radii) * np.tanh(z)
    return SigmaParams(*(float(v) for v in vals[:4])), float(vals[4]), float(vals[5])


def policy_for_exact(sigma: SigmaParams, cV: float, cD: float, alpha: float, beta: float,
                     box: ConstraintBox) -> PolicyParams:
    """Policy parameters whose constrained values equal the given physical ones."""
    z = box.z_for([*sigma, cV, cD])
    return PolicyParams.from_array(np.concatenate([z, [alpha, beta]]))


# --------------------------------------------------------------------------
# Computed-torque law
# --------------------------------------------------------------------------

def m_matrix(theta: float, sigma: SigmaParams) -> np.ndarray:
    s1, s2, s3, _ = sigma
    c, s = math.cos(theta), math.sin(theta)
    return np.array([
        [s1 * c - s2 * s, s1 * s + s2 * c, s3],
        [s1 * c + s2 * s, s1 * s - s2 * c, -s3],
    ])


def c_vector(omega: float, sigma4: float) -> np.ndarray:
    return -sigma4 * omega * omega * np.ones(2)


@dataclass(frozen=True)
class TrackingErrorState:
    e: np.ndarray
    e_int: np.ndarray
    e_dot: np.ndarray


@dataclass
class ErrorTracker:
    """Accumulates the world-frame tracking error and its clamped integral."""

    limit: float = INTEGRAL_LIMIT
    integral: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def reset(self):
        self.integral = np.zeros(3)

    def current(self, posture, rates, sample) -> TrackingErrorState:
        e = np.asarray(sample.p_d, dtype=float) - np.asarray(posture, dtype=float)
        e[2] = wrap_angle(e[2])
        e_dot = np.asarray(sample.pdot_d, dtype=float) - np.asarray(rates, dtype=float)
        return TrackingErrorState(e, self.integral.copy(), e_dot)

    def accumulate(self, e, dt: float):
        self.integral = np.clip(self.integral + np.asarray(e) * dt, -self.limit, self.limit)


def ctc_torque(err: TrackingErrorState, pddot_d, theta: float, pdot, sigma: SigmaParams,
               cV: float, cD: float, gains: GainSet, R: float, W: float) -> WheelTorques:
    """Unclipped computed-torque command with viscous and Coulomb compensation."""
    Kp, Ki, Kd = gains.diagonals()
    accel = np.asarray(pddot_d, dtype=float) + Kp * err.e + Ki * err.e_int + Kd * err.e_dot
    pdot = np.asarray(pdot, dtype=float)
    A, _ = kinematic_maps(theta, R, W)
    wheel = A @ pdot
    u = (m_matrix(theta, sigma) @ accel + c_vector(pdot[2], sigma.sigma4)
         + cV * wheel + cD * np.array([sgn_deadband(wheel[0]), sgn_deadband(wheel[1])]))
    return WheelTorques(float(u[0]), float(u[1]))


def _as_batch(s) -> tuple[np.ndarray, bool]:
    if isinstance(s, AgentState):
        s = s.vector
    s = np.asarray(s, dtype=float)
    return (s[None, :], True) if s.ndim == 1 else (s, False)


def _policy_vector(pi) -> np.ndarray:
    return pi.as_array() if isinstance(pi, PolicyParams) else np.asarray(pi, dtype=float)


def _gctc_terms(S: np.ndarray, pi: np.ndarray, box: ConstraintBox, eps: float, R: float, W: float):
    centers, radii = np.asarray(box.centers), np.asarray(box.radii)
    th = np.tanh(pi[:6])
    phys = centers + radii * th
    s1, s2, s3, s4, cV, cD = phys
    alpha, beta = pi[6], pi[7]
    a = alpha * alpha + eps
    b = beta * beta + eps
    kp = np.array([3 * a * a, 3 * a * a, 3 * b * b])
    ki = np.array([a ** 3, a ** 3, b ** 3])
    kd = np.array([3 * a, 3 * a, 3 * b])
    e, ei, ed = S[:, E], S[:, E_INT], S[:, E_DOT]
    w = S[:, PDDOT_D] + kp * e + ki * ei + kd * ed
    theta = S[:, THETA]
    c, s = np.cos(theta), np.sin(theta)
    rates = S[:, RATES]
    # wheel rates A(theta) @ pdot
    fwd_rate = c * rates[:, 0] + s * rates[:, 1]
    wR = (fwd_rate + 0.5 * W * rates[:, 2]) / R
    wL = (fwd_rate - 0.5 * W * rates[:, 2]) / R
    sgnR = np.where(wR > OMEGA_EPS, 1.0, np.where(wR < -OMEGA_EPS, -1.0, 0.0))
    sgnL = np.where(wL > OMEGA_EPS, 1.0, np.where(wL < -OMEGA_EPS, -1.0, 0.0))
    return dict(phys=phys, th=th, radii=radii, a=a, b=b, alpha=alpha, beta=beta,
                e=e, ei=ei, ed=ed, w=w, c=c, s=s, om=rates[:, 2],
                wR=wR, wL=wL, sgnR=sgnR, sgnL=sgnL)


def gctc_action_batch(S, pi, box: ConstraintBox, eps: float, R: float, W: float) -> np.ndarray:
    """Unclipped gray-box torques for a batch of agent states, shape ``(N, 2)``."""
    S, _ = _as_batch(S)
    t = _gctc_terms(S, _policy_vector(pi), box, eps, R, W)
    s1, s2, s3, s4, cV, cD = t["phys"]
    w, c, s = t["w"], t["c"], t["s"]
    fwd = c * w[:, 0] + s * w[:, 1]
    lat = c * w[:, 1] - s * w[:, 0]
    common = s1 * fwd - s4 * t["om"] ** 2
    diff = s2 * lat + s3 * w[:, 2]
    uR = common + diff + cV * t["wR"] + cD * t["sgnR"]
    uL = common - diff + cV * t["wL"] + cD * t["sgnL"]
    return np.stack([uR, uL], axis=1)


def gctc_action(s, pi, box: ConstraintBox, eps: float, R: float, W: float) -> WheelTorques:
    u = gctc_action_batch(s, pi, box, eps, R, W)[0]
    return WheelTorques(float(u[0]), float(u[1]))


def gctc_jacobian_batch(S, pi, box: ConstraintBox, eps: float, R: float, W: float) -> np.ndarray:
    """d(torques)/d(policy params), shape ``(N, 2, 8)``."""
    S, _ = _as_batch(S)
    t = _gctc_terms(S, _policy_vector(pi), box, eps, R, W)
    s1, s2, s3, s4, cV, cD = t["phys"]
    w, c, s = t["w"], t["c"], t["s"]
    n = S.shape[0]
    dphys = t["radii"] * (1.0 - t["th"] ** 2)
    fwd = c * w[:, 0] + s * w[:, 1]
    lat = c * w[:, 1] - s * w[:, 0]

    J = np.empty((n, 2, 8))
    J[:, 0, 0] = J[:, 1, 0] = fwd * dphys[0]
    J[:, 0, 1] = lat * dphys[1]
    J[:, 1, 1] = -J[:, 0, 1]
    J[:, 0, 2] = w[:, 2] * dphys[2]
    J[:, 1, 2] = -J[:, 0, 2]
    J[:, 0, 3] = J[:, 1, 3] = -t["om"] ** 2 * dphys[3]
    J[:, 0, 4] = t["wR"] * dphys[4]
    J[:, 1, 4] = t["wL"] * dphys[4]
    J[:, 0, 5] = t["sgnR"] * dphys[5]
    J[:, 1, 5] = t["sgnL"] * dphys[5]

    a, b = t["a"], t["b"]
    e, ei, ed = t["e"], t["ei"], t["ed"]
    # dw/da for the translation channels, dw/db for heading
    dw_da = (6 * a) * e[:, :2] + (3 * a * a) * ei[:, :2] + 3 * ed[:, :2]
    dw_db = (6 * b) * e[:, 2] + (3 * b * b) * ei[:, 2] + 3 * ed[:, 2]
    dfwd = c * dw_da[:, 0] + s * dw_da[:, 1]
    dlat = c * dw_da[:, 1] - s * dw_da[:, 0]
    da = 2 * t["alpha"]
    db = 2 * t["beta"]
    J[:, 0, 6] = (s1 * dfwd + s2 * dlat) * da
    J[:, 1, 6] = (s1 * dfwd - s2 * dlat) * da
    J[:, 0, 7] = s3 * dw_db * db
    J[:, 1, 7] = -J[:, 0, 7]
    return J


def gctc_jacobian(s, pi, box: ConstraintBox, eps: float, R: float, W: float) -> np.ndarray:
    return gctc_jacobian_batch(s, pi, box, eps, R, W)[0]


# --------------------------------------------------------------------------
# Closed-loop controller objects used by rollouts
# --------------------------------------------------------------------------

class Controller:
    """Feedback law evaluated every ``period`` seconds inside a rollout."""

    name = "controller"
    period = 1e-2

    def reset(self):
        pass

    def __call__(self, robot, sample, dt: float) -> WheelTorques:
        raise NotImplementedError


@dataclass(frozen=True)
class KinematicGains:
    k1: float = 2.0
    k2: float = 2.0
    k3: float = 2.0
    pid: PidGains = PidGains()


class KinematicController(Controller):
    name = "kinematic"

    def __init__(self, gains: KinematicGains, plant: PlantParams, period: float = 1e-3):
        self.gains = gains
        self.pid = replace(gains.pid, tau_max=plant.tau_max)
        self.R, self.W = plant.R, plant.W
        self.period = period
        self.reset()

    def reset(self):
        self._right = PidState()
        self._left = PidState()

    def __call__(self, robot, sample, dt):
        g = self.gains
        e_tilde = body_frame_error(robot.posture, sample.p_d)
        v, omega = kinematic_law(e_tilde, sample.v_d, sample.omega_d, g.k1, g.k2, g.k3)
        wRd, wLd = wheel_setpoints(v, omega, self.R, self.W)
        tauR, self._right = pid_wheel_step(wRd, robot.omegaR, self._right, dt, self.pid)
        tauL, self._left = pid_wheel_step(wLd, robot.omegaL, self._left, dt, self.pid)
        return WheelTorques(tauR, tauL)


class _ErrorFeedbackController(Controller):
    def __init__(self, plant: PlantParams, period: float, integral_limit: float):
        self.R, self.W = plant.R, plant.W
        self.period = period
        self.tracker = ErrorTracker(limit=integral_limit)

    def reset(self):
        self.tracker.reset()

    def observe(self, robot, sample) -> AgentState:
        err = self.tracker.current(robot.posture, robot.chassis_rates, sample)
        return AgentState.pack(err.e, err.e_int, err.e_dot, robot.chassis_rates, sample.pddot_d, robot.theta)

    def __call__(self, robot, sample, dt):
        s = self.observe(robot, sample)
        u = self.torque(s)
        self.tracker.accumulate(s.e, dt)
        return u


class GrayBoxController(_ErrorFeedbackController):
    """Computed-torque controller driven by the eight policy parameters."""

    name = "gctc"

    def __init__(self, pi, box: ConstraintBox, eps: float, plant: PlantParams,
                 period: float = 1e-2, integral_limit: float = INTEGRAL_LIMIT):
        super().__init__(plant, period, integral_limit)
        self.pi = _policy_vector(pi).copy()
        self.box, self.eps = box, eps

    def torque(self, s: AgentState) -> WheelTorques:
        return gctc_action(s, self.pi, self.box, self.eps, self.R, self.W)


class ComputedTorqueController(_ErrorFeedbackController):
    """Computed-torque controller with explicitly given model constants."""

    name = "ctc"

    def __init__(self, sigma: SigmaParams, cV: float, cD: float, gains: GainSet, plant: PlantParams,
                 period: float = 1e-2, integral_limit: float = INTEGRAL_LIMIT):
        super().__init__(plant, period, integral_limit)
        self.sigma, self.cV, self.cD, self.gains = SigmaParams(*sigma), cV, cD, gains

    @classmethod
    def exact(cls, plant: PlantParams, alpha: float, beta: float, eps: float = DEFAULT_EPS,
              **kwargs) -> "ComputedTorqueController":
        return cls(sigma_from_c(plant), plant.cV, plant.cD, gains_from_poles(alpha, beta, eps), plant, **kwargs)

    def torque(self, s: AgentState) -> WheelTorques:
        err = TrackingErrorState(s.e, s.e_int, s.e_dot)
        return ctc_torque(err, s.pddot_d, s.theta, s.rates, self.sigma, self.cV, self.cD,
                          self.gains, self.R, self.W)
