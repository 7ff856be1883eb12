"""
Agent observation vector.

Layout of the 16 entries (fixed; checkpoints and CSV logs rely on it)::

    0:3    e        tracking error p_d - p (heading wrapped)
    3:6    e_int    clamped running integral of e
    6:9    e_dot    pdot_d - pdot
    9:12   rates    (xdot, ydot, omega)
    12:15  pddot_d  desired acceleration
    15     theta    heading, unwrapped
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DIM = 16
E = slice(0, 3)
E_INT = slice(3, 6)
E_DOT = slice(6, 9)
RATES = slice(9, 12)
PDDOT_D = slice(12, 15)
THETA = 15
FIELDS = (
    "e_x", "e_y", "e_theta",
    "eint_x", "eint_y", "eint_theta",
    "edot_x", "edot_y", "edot_theta",
    "xdot", "ydot", "omega",
    "xdd_d", "ydd_d", "thetadd_d",
    "theta",
)


@dataclass(frozen=True)
class AgentState:
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float)
        if v.shape != (DIM,):
            raise ValueError(f"agent state must have {DIM} entries, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("agent state must be finite")
        object.__setattr__(self, "vector", v)

    @classmethod
    def pack(cls, e, e_int, e_dot, rates, pddot_d, theta: float) -> "AgentState":
        return cls(np.concatenate([e, e_int, e_dot, rates, pddot_d, [theta]]).astype(float))

    def unpack(self):
        v = self.vector
        return v[E], v[E_INT], v[E_DOT], v[RATES], v[PDDOT_D], float(v[THETA])

    @property
    def e(self):
        return self.vector[E]

    @property
    def e_int(self):
        return self.vector[E_INT]

    @property
    def e_dot(self):
        return self.vector[E_DOT]

    @property
    def rates(self):
        return self.vector[RATES]

    @property
    def pddot_d(self):
        return self.vector[PDDOT_D]

    @property
    def theta(self) -> float:
        return float(self.vector[THETA])

    @property
    def tracking_error(self):
        """Stacked ``[e, e_int, e_dot]`` used by the reward."""
        return self.vector[:9]


def assemble_state(robot, err, pddot_d) -> AgentState:
    """Pack a plant state and tracking-error record into the observation vector."""
    return AgentState.pack(err.e, err.e_int, err.e_dot, robot.chassis_rates, pddot_d, robot.theta)


def sech_reward(E, u, He, Hu) -> float:
    """``sech(E' He E + u' Hu u)``, kept strictly positive for huge quadratic costs."""
    E = np.asarray(E, dtype=float)
    u = np.asarray(u, dtype=float)
    q = float(E @ np.asarray(He) @ E + u @ np.asarray(Hu) @ u)
    return max(1.0 / math.cosh(min(q, 700.0)), 1e-300)
