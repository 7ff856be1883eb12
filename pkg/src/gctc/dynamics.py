"""
Differential-drive mobile robot plant.

State vector ordering (10 entries)::

    [x, xdot, y, ydot, theta, omega, phiR, omegaR, phiL, omegaL]

Inputs are the two wheel torques ``(tauR, tauL)``.  The chassis and wheel
accelerations are driven by the nine coupling constants ``c1..c9``; viscous
and Coulomb wheel friction are subtracted from the applied torques before
they enter the frictionless equations of motion.

The rigid-body equations only keep the no-slip constraint invariant when the
constants satisfy ``c1 = R/2``, ``c2 = R(c6 + c7)/2``, ``c2*c3 = R*c8``,
``c5 = R(c6 - c7)/W`` and ``c4 = -2*R*c9/W``.  :meth:`PlantParams.kinematic_defect`
reports how far a parameter set is from that manifold.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, IntegrationError

#: Coulomb sign is zero for wheel rates below this magnitude (rad/s).
OMEGA_EPS = 1e-4

STATE_DIM = 10
IX, IXD, IY, IYD, ITH, IOM, IPR, IWR, IPL, IWL = range(STATE_DIM)


@dataclass(frozen=True)
class PlantParams:
    R: float = 0.1
    W: float = 0.4
    c1: float = 0.05
    c2: float = 2.0
    c3: float = 0.02
    c4: float = -0.125
    c5: float = 25.0
    c6: float = 70.0
    c7: float = -30.0
    c8: float = 0.4
    c9: float = 0.25
    cV: float = 0.02
    cD: float = 0.02
    tau_max: float = 5.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ConfigError(f"plant.{f.name} must be a finite number, got {value!r}")
        if self.R <= 0 or self.W <= 0 or self.tau_max <= 0:
            raise ConfigError("plant R, W and tau_max must be positive")
        if self.cV < 0 or self.cD < 0:
            raise ConfigError("plant friction coefficients cV, cD must be non-negative")
        for name in ("c1", "c2", "c3", "c5", "c6", "c8", "c9"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"plant.{name} must be positive")
        if self.c4 >= 0:
            raise ConfigError("plant.c4 must be negative")

    def kinematic_defect(self) -> float:
        """Largest violation of the relations that keep the no-slip constraint invariant."""
        R, W = self.R, self.W
        residuals = (
            self.c1 - R / 2,
            self.c2 - R * (self.c6 + self.c7) / 2,
            self.c2 * self.c3 - R * self.c8,
            self.c5 - R * (self.c6 - self.c7) / W,
            self.c4 + 2 * R * self.c9 / W,
        )
        return max(abs(r) for r in residuals)

    def to_dict(self) -> dict:
        return asdict(self)


class WheelTorques(NamedTuple):
    tauR: float
    tauL: float


class SigmaParams(NamedTuple):
    sigma1: float
    sigma2: float
    sigma3: float
    sigma4: float


@dataclass(frozen=True)
class RobotState:
    """Plant state; field order matches the 10-vector layout."""

    x: float
    xdot: float
    y: float
    ydot: float
    theta: float
    omega: float
    phiR: float
    omegaR: float
    phiL: float
    omegaL: float

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)

    def as_tuple(self) -> tuple:
        return (self.x, self.xdot, self.y, self.ydot, self.theta, self.omega,
                self.phiR, self.omegaR, self.phiL, self.omegaL)

    @classmethod
    def from_array(cls, values) -> "RobotState":
        values = [float(v) for v in values]
        if len(values) != STATE_DIM:
            raise ValueError(f"expected {STATE_DIM} state entries, got {len(values)}")
        return cls(*values)

    @property
    def posture(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @property
    def chassis_rates(self) -> np.ndarray:
        return np.array([self.xdot, self.ydot, self.omega])

    @property
    def wheel_rates(self) -> np.ndarray:
        return np.array([self.omegaR, self.omegaL])


def kinematic_maps(theta: float, R: float, W: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(A, A_tilde)``: chassis-rate to wheel-rate map and its right inverse."""
    if not math.isfinite(theta):
        raise ValueError("theta must be finite")
    if R <= 0 or W <= 0:
        raise ValueError("R and W must be positive")
    c, s = math.cos(theta), math.sin(theta)
    A = np.array([[c, s, W / 2], [c, s, -W / 2]]) / R
    A_tilde = (R / 2) * np.array([[c, c], [s, s], [2 / W, -2 / W]])
    return A, A_tilde


def sgn_deadband(w: float, eps: float = OMEGA_EPS) -> float:
    if w > eps:
        return 1.0
    if w < -eps:
        return -1.0
    return 0.0


def friction_torque(omegaR: float, omegaL: float, params: PlantParams) -> WheelTorques:
    return WheelTorques(
        params.cV * omegaR + params.cD * sgn_deadband(omegaR),
        params.cV * omegaL + params.cD * sgn_deadband(omegaL),
    )


def consistent_state(posture, v: float, omega: float, wheel_angles=(0.0, 0.0),
                     params: PlantParams | None = None) -> RobotState:
    """Build a state that satisfies the no-slip constraint exactly."""
    params = params or PlantParams()
    x, y, theta = (float(p) for p in posture)
    omegaR = (v + params.W * omega / 2) / params.R
    omegaL = (v - params.W * omega / 2) / params.R
    return RobotState(
        x=x, xdot=v * math.cos(theta), y=y, ydot=v * math.sin(theta),
        theta=theta, omega=float(omega),
        phiR=float(wheel_angles[0]), omegaR=omegaR,
        phiL=float(wheel_angles[1]), omegaL=omegaL,
    )


def nonholonomic_residual(s: RobotState, params: PlantParams) -> float:
    """Euclidean norm of ``pdot - A_tilde(theta) @ wheel_rates``."""
    _, A_tilde = kinematic_maps(s.theta, params.R, params.W)
    return float(np.linalg.norm(s.chassis_rates - A_tilde @ s.wheel_rates))


def _derivative(x, u1: float, u2: float, p: PlantParams) -> list:
    # x is any 10-sequence of floats; kept scalar for speed inside RK4
    th, om, wR, wL = x[ITH], x[IOM], x[IWR], x[IWL]
    u1 -= p.cV * wR + p.cD * sgn_deadband(wR)
    u2 -= p.cV * wL + p.cD * sgn_deadband(wL)
    c, s = math.cos(th), math.sin(th)
    coupling = om * (wR + wL)
    drive = p.c2 * (u1 + u2 + p.c3 * om * om)
    return [
        x[IXD],
        -p.c1 * coupling * s + drive * c,
        x[IYD],
        p.c1 * coupling * c + drive * s,
        om,
        p.c4 * coupling + p.c5 * (u1 - u2),
        wR,
        p.c6 * u1 + p.c7 * u2 + p.c8 * om * om - p.c9 * coupling,
        wL,
        p.c7 * u1 + p.c6 * u2 + p.c8 * om * om + p.c9 * coupling,
    ]


def state_derivative(s: RobotState, u, params: PlantParams) -> np.ndarray:
    x = s.as_tuple()
    u1, u2 = float(u[0]), float(u[1])
    if not (all(math.isfinite(v) for v in x) and math.isfinite(u1) and math.isfinite(u2)):
        raise ValueError("state and torques must be finite")
    return np.array(_derivative(x, u1, u2, params))


def _rk4(x: list, u1: float, u2: float, dt: float, p: PlantParams) -> list:
    k1 = _derivative(x, u1, u2, p)
    k2 = _derivative([a + 0.5 * dt * b for a, b in zip(x, k1)], u1, u2, p)
    k3 = _derivative([a + 0.5 * dt * b for a, b in zip(x, k2)], u1, u2, p)
    k4 = _derivative([a + dt * b for a, b in zip(x, k3)], u1, u2, p)
    return [a + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
            for a, b1, b2, b3, b4 in zip(x, k1, k2, k3, k4)]


def step(s: RobotState, u, dt: float, params: PlantParams, substeps: int = 1) -> RobotState:
    """Advance the plant by ``substeps`` RK4 steps of size ``dt`` with torque held."""
    if not 0 < dt <= 0.01:
        raise ValueError(f"dt must lie in (0, 0.01], got {dt}")
    u1, u2 = float(u[0]), float(u[1])
    x = list(s.as_tuple())
    for _ in range(substeps):
        x = _rk4(x, u1, u2, dt, params)
    if not all(math.isfinite(v) for v in x):
        raise IntegrationError(f"non-finite plant state after step: {x}")
    return RobotState(*x)


def sigma_from_c(params: PlantParams) -> SigmaParams:
    """Reparametrized dynamic constants used by the computed-torque law."""
    if params.c1 == 0 or params.c2 == 0 or params.c5 == 0:
        raise ValueError("c1, c2 and c5 must be non-zero")
    sigma = SigmaParams(
        1.0 / (2.0 * params.c2),
        -params.c4 / (2.0 * params.c1 * params.c5),
        1.0 / (2.0 * params.c5),
        params.c3 / 2.0,
    )
    if min(sigma) <= 0:
        raise ValueError(f"sigma parameters must be positive, got {sigma}")
    return sigma
