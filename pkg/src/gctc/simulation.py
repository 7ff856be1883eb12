"""Closed-loop rollouts of the plant against a reference trajectory."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dynamics
from .controllers import Controller, ErrorTracker, INTEGRAL_LIMIT, wrap_angle
from .dynamics import PlantParams, RobotState, WheelTorques
from .observation import AgentState, sech_reward
from .trajectories import TrajectorySpec, sample

TRACE_COLUMNS = ("t", "x", "y", "theta", "x_d", "y_d", "theta_d", "tau_R", "tau_L", "r")


def substeps_for(period: float, dt: float) -> int:
    n = int(round(period / dt))
    if n < 1 or not math.isclose(n * dt, period, rel_tol=1e-9):
        raise ValueError(f"control period {period} is not a multiple of plant dt {dt}")
    return n


def start_state(spec: TrajectorySpec, plant: PlantParams, rng: np.random.Generator | None = None,
                pos_sigma: float = 0.0, heading_sigma: float = 0.0) -> RobotState:
    """Robot placed on the trajectory start with matched speed, optionally perturbed."""
    s0 = sample(spec, 0.0)
    posture = np.array(s0.p_d, dtype=float)
    if rng is not None and (pos_sigma > 0 or heading_sigma > 0):
        noise = rng.standard_normal(3)
        posture += noise * np.array([pos_sigma, pos_sigma, heading_sigma])
    return dynamics.consistent_state(posture, s0.v_d, s0.omega_d, (0.0, 0.0), plant)


def clip_torque(u, tau_max: float) -> WheelTorques:
    return WheelTorques(min(max(float(u[0]), -tau_max), tau_max), min(max(float(u[1]), -tau_max), tau_max))


class ConstantTorque(Controller):
    """Open-loop controller that holds a fixed torque pair."""

    name = "open_loop"

    def __init__(self, u, period: float = 1e-2):
        self.u = WheelTorques(float(u[0]), float(u[1]))
        self.period = period

    def __call__(self, robot, sample_, dt):
        return self.u


def rollout(plant: PlantParams, spec: TrajectorySpec, controller: Controller, duration: float,
            start: RobotState, dt: float = 1e-3, log_period: float = 1e-2,
            weights: tuple | None = None, integral_limit: float = INTEGRAL_LIMIT) -> list[tuple]:
    """Run ``controller`` for ``duration`` seconds; returns rows matching ``TRACE_COLUMNS``.

    Rows are logged every ``log_period`` regardless of the controller rate.
    Row ``k`` holds the state at ``t_k`` and the torque in force from ``t_k``;
    the final row repeats the last applied torque.  With ``weights=(He, Hu)``
    the reward column is computed from an error record integrated at the log
    rate, otherwise it is NaN.
    """
    n_ctrl = substeps_for(controller.period, dt)
    n_log = substeps_for(log_period, dt)
    n_steps = int(round(duration / dt))
    if n_steps % n_log:
        raise ValueError(f"duration {duration} is not a multiple of the log period {log_period}")
    controller.reset()
    tracker = ErrorTracker(limit=integral_limit) if weights is not None else None
    robot = start
    rows = []
    u = WheelTorques(0.0, 0.0)
    for k in range(n_steps + 1):
        t = k * dt
        on_ctrl = k % n_ctrl == 0 and k < n_steps
        on_log = k % n_log == 0
        if on_ctrl or on_log:
            ref = sample(spec, t)
        if on_ctrl:
            u = clip_torque(controller(robot, ref, controller.period), plant.tau_max)
        if on_log:
            r = math.nan
            if tracker is not None:
                err = tracker.current(robot.posture, robot.chassis_rates, ref)
                r = sech_reward(np.concatenate([err.e, err.e_int, err.e_dot]), u, *weights)
                tracker.accumulate(err.e, log_period)
            rows.append((t, robot.x, robot.y, robot.theta, ref.p_d[0], ref.p_d[1], ref.p_d[2], u[0], u[1], r))
        if k < n_steps:
            robot = dynamics.step(robot, u, dt, plant)
    return rows


@dataclass
class TrackingEnv:
    """Plant plus reference trajectory exposed as an agent-state environment."""

    plant: PlantParams
    spec: TrajectorySpec
    dt: float = 1e-3
    control_period: float = 1e-2
    max_track_error: float = 1.0
    max_episode_len: float = 5.0
    pos_sigma: float = 0.05
    heading_sigma: float = 0.05
    integral_limit: float = INTEGRAL_LIMIT

    def __post_init__(self):
        self._substeps = substeps_for(self.control_period, self.dt)
        self.tracker = ErrorTracker(limit=self.integral_limit)
        self.robot: RobotState | None = None
        self.t = 0.0
        self.k = 0

    @property
    def max_steps(self) -> int:
        return int(round(self.max_episode_len / self.control_period))

    def reset(self, rng: np.random.Generator | None = None) -> AgentState:
        self.robot = start_state(self.spec, self.plant, rng, self.pos_sigma, self.heading_sigma)
        self.tracker.reset()
        self.k = 0
        self.t = 0.0
        return self.observe()

    def observe(self) -> AgentState:
        ref = sample(self.spec, self.t)
        err = self.tracker.current(self.robot.posture, self.robot.chassis_rates, ref)
        self._ref = ref
        return AgentState.pack(err.e, err.e_int, err.e_dot, self.robot.chassis_rates, ref.pddot_d, self.robot.theta)

    def step(self, u) -> tuple[AgentState, bool, str | None]:
        """Apply an (already clipped) torque for one control period.

        Returns ``(next_state, terminal, reason)``; ``terminal`` is true only
        for the tracking-error cutoff, ``reason`` is set whenever the episode ends.
        """
        e_now = self._ref.p_d - self.robot.posture
        e_now[2] = wrap_angle(e_now[2])
        self.tracker.accumulate(e_now, self.control_period)
        self.robot = dynamics.step(self.robot, u, self.dt, self.plant, substeps=self._substeps)
        self.k += 1
        self.t = self.k * self.control_period
        s_next = self.observe()
        if math.hypot(s_next.e[0], s_next.e[1]) > self.max_track_error:
            return s_next, True, "track_error"
        if self.k >= self.max_steps:
            return s_next, False, "time_limit"
        return s_next, False, None
