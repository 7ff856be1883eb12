"""
Analytic reference trajectories.

Each generator returns position, velocity and acceleration of the desired
posture ``(x_d, y_d, theta_d)`` with the heading taken from the velocity
direction.  Heading derivatives come from the planar curvature identities::

    omega = (xd*ydd - yd*xdd) / v^2
    alpha = ((xd*yddd - yd*xddd) * v^2 - (xd*ydd - yd*xdd) * 2*(xd*xdd + yd*ydd)) / v^4
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Union

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class TrajectorySample:
    p_d: np.ndarray
    pdot_d: np.ndarray
    pddot_d: np.ndarray
    v_d: float
    omega_d: float


@dataclass(frozen=True)
class Sinusoid:
    forward_speed: float
    amplitude: float
    wavelength: float

    kind = "sinusoid"

    def __post_init__(self):
        _require_positive(self, "forward_speed", "amplitude", "wavelength")


@dataclass(frozen=True)
class Circle:
    radius: float
    base_rate: float
    rate_mod_amp: float
    rate_mod_freq: float

    kind = "circle"

    def __post_init__(self):
        _require_positive(self, "radius", "base_rate", "rate_mod_freq")
        if not math.isfinite(self.rate_mod_amp) or abs(self.rate_mod_amp) >= self.base_rate:
            raise ConfigError("circle: |rate_mod_amp| must be below base_rate so the path never stops")


@dataclass(frozen=True)
class Square:
    side: float
    corner_radius: float
    speed: float

    kind = "square"

    def __post_init__(self):
        _require_positive(self, "side", "corner_radius", "speed")
        if self.corner_radius >= self.side / 2:
            raise ConfigError("square: corner_radius must be below side/2")

    @property
    def straight(self) -> float:
        return self.side - 2 * self.corner_radius

    @property
    def length(self) -> float:
        return 4 * self.straight + 2 * math.pi * self.corner_radius


TrajectorySpec = Union[Sinusoid, Circle, Square]
KINDS = {cls.kind: cls for cls in (Sinusoid, Circle, Square)}


def _require_positive(spec, *names):
    for name in names:
        value = getattr(spec, name)
        if not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0:
            raise ConfigError(f"{spec.kind}.{name} must be a positive finite number, got {value!r}")


def spec_to_dict(spec: TrajectorySpec) -> dict:
    return {"kind": spec.kind, **asdict(spec)}


def spec_from_dict(data: dict) -> TrajectorySpec:
    data = dict(data)
    kind = data.pop("kind", None)
    if kind not in KINDS:
        raise ConfigError(f"unknown trajectory kind {kind!r}; expected one of {sorted(KINDS)}")
    try:
        return KINDS[kind](**data)
    except TypeError as exc:
        raise ConfigError(f"{kind}: {exc}") from None


def _from_cartesian(pos, vel, acc, jerk, theta: float) -> TrajectorySample:
    xd, yd = vel
    xdd, ydd = acc
    xddd, yddd = jerk
    v2 = xd * xd + yd * yd
    cross = xd * ydd - yd * xdd
    omega = cross / v2
    alpha = ((xd * yddd - yd * xddd) * v2 - cross * 2.0 * (xd * xdd + yd * ydd)) / (v2 * v2)
    return TrajectorySample(
        p_d=np.array([pos[0], pos[1], theta]),
        pdot_d=np.array([xd, yd, omega]),
        pddot_d=np.array([xdd, ydd, alpha]),
        v_d=math.sqrt(v2),
        omega_d=omega,
    )


def _sample_sinusoid(spec: Sinusoid, t: float) -> TrajectorySample:
    s, A, k = spec.forward_speed, spec.amplitude, 2 * math.pi / spec.wavelength
    x = s * t
    ph = k * x
    sn, cs = math.sin(ph), math.cos(ph)
    vel = (s, A * k * s * cs)
    acc = (0.0, -A * k * k * s * s * sn)
    jerk = (0.0, -A * k ** 3 * s ** 3 * cs)
    # forward speed is positive so the heading never leaves (-pi/2, pi/2)
    theta = math.atan2(vel[1], vel[0])
    return _from_cartesian((x, A * sn), vel, acc, jerk, theta)


def _sample_circle(spec: Circle, t: float) -> TrajectorySample:
    rho, w0, w1, nu = spec.radius, spec.base_rate, spec.rate_mod_amp, spec.rate_mod_freq
    phi = w0 * t + (w1 / nu) * (1.0 - math.cos(nu * t))
    phid = w0 + w1 * math.sin(nu * t)
    phidd = w1 * nu * math.cos(nu * t)
    sn, cs = math.sin(phi), math.cos(phi)
    v = rho * phid
    return TrajectorySample(
        p_d=np.array([rho * cs, rho * sn, phi + math.pi / 2]),
        pdot_d=np.array([-v * sn, v * cs, phid]),
        pddot_d=np.array([-rho * phidd * sn - rho * phid ** 2 * cs,
                          rho * phidd * cs - rho * phid ** 2 * sn,
                          phidd]),
        v_d=v,
        omega_d=phid,
    )


def _sample_square(spec: Square, t: float) -> TrajectorySample:
    # Counterclockwise around [0, side]^2 starting at (r, 0) heading +x.
    # Each quarter is a straight of length `straight` followed by a 90 degree arc.
    L, r, V = spec.side, spec.corner_radius, spec.speed
    ell = spec.straight
    arc = 0.5 * math.pi * r
    quarter = ell + arc
    dist = V * t
    lap, rem = divmod(dist, spec.length)
    k, u = divmod(rem, quarter)
    k = min(int(k), 3)
    u = rem - k * quarter
    base = k * 0.5 * math.pi
    # straight start points and arc centres for the four quarters
    starts = ((r, 0.0), (L, r), (L - r, L), (0.0, L - r))
    centres = ((L - r, r), (L - r, L - r), (r, L - r), (r, r))
    if u < ell:
        heading = base
        ch, sh = math.cos(heading), math.sin(heading)
        sx, sy = starts[k]
        pos = (sx + u * ch, sy + u * sh)
        omega = 0.0
        acc = (0.0, 0.0)
    else:
        heading = base + (u - ell) / r
        ch, sh = math.cos(heading), math.sin(heading)
        cx, cy = centres[k]
        pos = (cx + r * sh, cy - r * ch)
        omega = V / r
        acc = (-V * omega * sh, V * omega * ch)
    theta = heading + 2 * math.pi * lap
    return TrajectorySample(
        p_d=np.array([pos[0], pos[1], theta]),
        pdot_d=np.array([V * ch, V * sh, omega]),
        pddot_d=np.array([acc[0], acc[1], 0.0]),
        v_d=V,
        omega_d=omega,
    )


_SAMPLERS = {Sinusoid: _sample_sinusoid, Circle: _sample_circle, Square: _sample_square}


def sample(spec: TrajectorySpec, t: float) -> TrajectorySample:
    """Desired posture and its first two derivatives at time ``t``."""
    if not (math.isfinite(t) and t >= 0):
        raise ValueError(f"t must be finite and non-negative, got {t}")
    try:
        sampler = _SAMPLERS[type(spec)]
    except KeyError:
        raise ConfigError(f"not a trajectory spec: {spec!r}") from None
    return sampler(spec, float(t))


def default_suite() -> tuple[TrajectorySpec, tuple[TrajectorySpec, TrajectorySpec, TrajectorySpec]]:
    train = Sinusoid(forward_speed=1.0, amplitude=1.0, wavelength=4.0)
    tests = (
        Sinusoid(forward_speed=2.0, amplitude=1.0, wavelength=4.0),
        Circle(radius=2.0, base_rate=0.5, rate_mod_amp=0.25, rate_mod_freq=0.5),
        Square(side=3.0, corner_radius=0.3, speed=1.0),
    )
    return train, tests
