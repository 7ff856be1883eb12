"""
Experiment configuration, metrics and run orchestration.

A run is fully determined by an :class:`ExperimentConfig` and a seed.  All
file outputs go through the writers here so byte-level reproducibility is
handled in one place (fixed column order, ``repr`` float formatting, sorted
JSON keys).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import approximator as mlp
from .controllers import (
    ComputedTorqueController, ConstraintBox, DEFAULT_EPS, GrayBoxController, KinematicController,
    KinematicGains, PidGains, PolicyParams, constrain_params, wrap_angle,
)
from .dynamics import PlantParams
from .errors import ConfigError, MissingKeyError, UnknownKeyError
from .simulation import TRACE_COLUMNS, ConstantTorque, rollout, start_state
from .td3 import LOG_COLUMNS, TrainerConfig, train
from .trajectories import KINDS as TRAJECTORY_KINDS, TrajectorySpec, default_suite, spec_to_dict

CONFIG_VERSION = 1
TRACE_SCHEMA = "gctc-trace/1"
LOG_SCHEMA = "gctc-training-log/1"
POLICY_FORMAT = "gctc-policy"
POLICY_VERSION = 1
OUTPUT_DIR_ENV = "GCTC_OUTPUT_DIR"
CONTROLLERS = ("kinematic", "ctc", "gctc")
KINEMATIC_TOL = 1e-9


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class KinematicSection:
    gains: KinematicGains = KinematicGains()
    period: float = 1e-3

    def __post_init__(self):
        g = self.gains
        values = (g.k1, g.k2, g.k3, g.pid.kp, g.pid.ki, g.pid.kd, g.pid.integral_limit, self.period)
        if not all(math.isfinite(v) for v in values):
            raise ConfigError("kinematic gains and period must be finite")
        if min(g.k1, g.k2, g.k3, self.period, g.pid.integral_limit) <= 0 or min(g.pid.kp, g.pid.ki, g.pid.kd) < 0:
            raise ConfigError("kinematic gains must be positive and PID gains non-negative")


@dataclass(frozen=True)
class CtcSection:
    """Exact-model computed-torque baseline.

    With ``share_learned_gains`` the baseline uses the pole parameters the
    gray-box policy learned for the same seed, so the comparison isolates the
    model constants; otherwise ``alpha``/``beta`` are used throughout.
    """

    alpha: float = 1.0
    beta: float = 1.0
    share_learned_gains: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ConfigError("ctc.alpha and ctc.beta must be finite")


@dataclass(frozen=True)
class GctcSection:
    box: ConstraintBox = ConstraintBox()
    eps: float = DEFAULT_EPS
    initial: PolicyParams = PolicyParams()


@dataclass(frozen=True)
class EvaluationSection:
    duration: float = 12.0
    control_period: float = 1e-2
    plant_dt: float = 1e-3
    log_period: float = 1e-2
    start_pos_sigma: float = 0.01
    start_heading_sigma: float = 0.01

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if not getattr(self, f.name) >= 0 or not math.isfinite(getattr(self, f.name)):
                raise ConfigError(f"evaluation.{f.name} must be a finite non-negative number")
        for name in ("duration", "control_period", "plant_dt", "log_period"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"evaluation.{name} must be positive")


def _default_trajectories() -> dict:
    train_spec, (fast, circle, square) = default_suite()
    return {"train": train_spec, "tests": {"high_velocity_sinusoid": fast, "circle": circle, "square": square}}


@dataclass(frozen=True)
class ExperimentConfig:
    plant: PlantParams = PlantParams()
    train_trajectory: TrajectorySpec = field(default_factory=lambda: _default_trajectories()["train"])
    test_trajectories: dict = field(default_factory=lambda: _default_trajectories()["tests"])
    kinematic: KinematicSection = KinematicSection()
    ctc: CtcSection = CtcSection()
    gctc: GctcSection = GctcSection()
    trainer: TrainerConfig = TrainerConfig()
    evaluation: EvaluationSection = EvaluationSection()
    seeds: tuple = (0, 1, 2, 3, 4)
    output_dir: str = "runs"

    def __post_init__(self):
        if self.plant.kinematic_defect() > KINEMATIC_TOL:
            raise ConfigError("plant constants violate the no-slip consistency relations "
                              f"(defect {self.plant.kinematic_defect():.3g})")
        if not self.test_trajectories:
            raise ConfigError("trajectories.tests must name at least one trajectory")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds) or min(self.seeds) < 0:
            raise ConfigError("seeds must be distinct non-negative integers")
        if not self.gctc.box.contains(_physical(self.gctc.initial, self.gctc.box)):
            raise ConfigError("gctc.initial maps outside the constraint box")
        if not (self.gctc.eps > 0 and math.isfinite(self.gctc.eps)):
            raise ConfigError("gctc.eps must be positive")
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(self, "test_trajectories", dict(self.test_trajectories))


def _physical(pi: PolicyParams, box: ConstraintBox) -> np.ndarray:
    sigma, cV, cD = constrain_params(pi.as_array(), box)
    return np.array([*sigma, cV, cD])


# keys that exist on the dataclasses but are derived elsewhere, not configured
_DERIVED_FIELDS = {PidGains: {"tau_max"}}


def _check_keys(data, expected, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - set(expected))
    if unknown:
        raise UnknownKeyError(f"unknown key {_join(path, unknown[0])}")
    missing = [k for k in expected if k not in data]
    if missing:
        raise MissingKeyError(f"missing key {_join(path, missing[0])}")


def _join(path: str, key) -> str:
    return f"{path}.{key}" if path else str(key)


def _coerce(value, like, path: str):
    """Convert a parsed YAML value to the type of the default ``like``."""
    if isinstance(like, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false")
        return value
    if isinstance(like, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if isinstance(like, float):
        if isinstance(value, bool):
            raise ConfigError(f"{path} must be a number")
        try:
            # YAML 1.1 reads "1e-3" as a string; accept it
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path} must be a number, got {value!r}") from None
    if isinstance(like, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    if isinstance(like, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list")
        proto = like[0] if like else 0.0
        return tuple(_coerce(v, proto, f"{path}[{i}]") for i, v in enumerate(value))
    if dataclasses.is_dataclass(like):
        return _parse_dataclass(type(like), value, path, like)
    raise ConfigError(f"{path}: unsupported value type")


def _parse_dataclass(cls, data, path: str, defaults=None):
    defaults = cls() if defaults is None else defaults
    names = [f.name for f in dataclasses.fields(cls) if f.name not in _DERIVED_FIELDS.get(cls, ())]
    _check_keys(data, names, path)
    kwargs = {n: _coerce(data[n], getattr(defaults, n), _join(path, n)) for n in names}
    try:
        return dataclasses.replace(defaults, **kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _dump(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _dump(getattr(value, f.name)) for f in dataclasses.fields(value)
                if f.name not in _DERIVED_FIELDS.get(type(value), ())}
    if isinstance(value, (tuple, list)):
        return [_dump(v) for v in value]
    return value


def _parse_trajectory(data, path: str) -> TrajectorySpec:
    if not isinstance(data, dict) or "kind" not in data:
        raise MissingKeyError(f"missing key {_join(path, 'kind')}")
    cls = TRAJECTORY_KINDS.get(data["kind"])
    if cls is None:
        raise ConfigError(f"{path}.kind: unknown trajectory kind {data['kind']!r}")
    names = [f.name for f in dataclasses.fields(cls)]
    body = {k: v for k, v in data.items() if k != "kind"}
    _check_keys(body, names, path)
    try:
        return cls(**{n: _coerce(body[n], 0.0, _join(path, n)) for n in names})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


SECTIONS = ("version", "plant", "trajectories", "kinematic", "ctc", "gctc", "trainer",
            "evaluation", "seeds", "output_dir")


def config_from_dict(data) -> ExperimentConfig:
    _check_keys(data, SECTIONS, "")
    if data["version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {data['version']!r}; expected {CONFIG_VERSION}")
    traj = data["trajectories"]
    _check_keys(traj, ("train", "tests"), "trajectories")
    if not isinstance(traj["tests"], dict):
        raise ConfigError("trajectories.tests must map names to trajectories")
    tests = {str(name): _parse_trajectory(spec, f"trajectories.tests.{name}") for name, spec in traj["tests"].items()}
    seeds = data["seeds"]
    if not isinstance(seeds, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds must be a list of integers")
    if not isinstance(data["output_dir"], str):
        raise ConfigError("output_dir must be a string")
    return ExperimentConfig(
        plant=_parse_dataclass(PlantParams, data["plant"], "plant"),
        train_trajectory=_parse_trajectory(traj["train"], "trajectories.train"),
        test_trajectories=tests,
        kinematic=_parse_dataclass(KinematicSection, data["kinematic"], "kinematic"),
        ctc=_parse_dataclass(CtcSection, data["ctc"], "ctc"),
        gctc=_parse_dataclass(GctcSection, data["gctc"], "gctc"),
        trainer=_parse_dataclass(TrainerConfig, data["trainer"], "trainer"),
        evaluation=_parse_dataclass(EvaluationSection, data["evaluation"], "evaluation"),
        seeds=tuple(seeds),
        output_dir=data["output_dir"],
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "version": CONFIG_VERSION,
        "plant": _dump(cfg.plant),
        "trajectories": {
            "train": spec_to_dict(cfg.train_trajectory),
            "tests": {name: spec_to_dict(spec) for name, spec in cfg.test_trajectories.items()},
        },
        "kinematic": _dump(cfg.kinematic),
        "ctc": _dump(cfg.ctc),
        "gctc": _dump(cfg.gctc),
        "trainer": _dump(cfg.trainer),
        "evaluation": _dump(cfg.evaluation),
        "seeds": list(cfg.seeds),
        "output_dir": cfg.output_dir,
    }


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def resolve_output_dir(cfg: ExperimentConfig, override=None) -> Path:
    """``--out`` beats the environment variable, which beats the config file."""
    if override is not None:
        return Path(override)
    return Path(os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir)


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RunMetrics:
    rms_pos_err: float
    max_pos_err: float
    rms_heading_err: float
    control_effort: float
    termination: str
    duration: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def metrics(trace, termination: str = "completed") -> RunMetrics:
    """Error and effort summary of a trace with ``TRACE_COLUMNS`` rows."""
    rows = np.asarray(trace, dtype=float)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError("metrics need a non-empty trace")
    if rows.shape[1] != len(TRACE_COLUMNS):
        raise ValueError(f"trace rows must have {len(TRACE_COLUMNS)} columns")
    t, x, y, th, xd, yd, thd, tr, tl = (rows[:, i] for i in range(9))
    pos = np.hypot(xd - x, yd - y)
    head = np.array([wrap_angle(v) for v in thd - th])
    effort_rate = tr * tr + tl * tl
    effort = float(np.sum(0.5 * (effort_rate[1:] + effort_rate[:-1]) * np.diff(t))) if len(t) > 1 else 0.0
    return RunMetrics(
        rms_pos_err=float(np.sqrt(np.mean(pos * pos))),
        max_pos_err=float(np.max(pos)),
        rms_heading_err=float(np.sqrt(np.mean(head * head))),
        control_effort=effort,
        termination=termination,
        duration=float(t[-1] - t[0]),
    )


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def write_csv(path, schema: str, columns, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# {schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> tuple[str, list[str], np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"{path}: missing schema header")
    columns = lines[1].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[2:]]) if len(lines) > 2 else np.empty((0, len(columns)))
    return lines[0][2:], columns, data


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def policy_to_dict(pi: PolicyParams, box: ConstraintBox, eps: float) -> dict:
    sigma_cv_cd = _physical(pi, box)
    return {
        "format": POLICY_FORMAT,
        "version": POLICY_VERSION,
        "policy": dict(zip(PolicyParams.NAMES, pi.as_array().tolist())),
        "box": {"centers": list(box.centers), "radii": list(box.radii)},
        "eps": eps,
        "physical": dict(zip(("sigma1", "sigma2", "sigma3", "sigma4", "cV", "cD"), sigma_cv_cd.tolist())),
    }


def policy_from_dict(data) -> tuple[PolicyParams, ConstraintBox, float]:
    if not isinstance(data, dict) or data.get("format") != POLICY_FORMAT or data.get("version") != POLICY_VERSION:
        raise ConfigError(f"not a {POLICY_FORMAT} v{POLICY_VERSION} checkpoint")
    try:
        pi = PolicyParams(**{n: float(data["policy"][n]) for n in PolicyParams.NAMES})
        box = ConstraintBox(tuple(data["box"]["centers"]), tuple(data["box"]["radii"]))
        eps = float(data["eps"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed policy checkpoint: {exc}") from None
    return pi, box, eps


def load_policy(path) -> tuple[PolicyParams, ConstraintBox, float]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    return policy_from_dict(data)


# --------------------------------------------------------------------------
# Orchestration
# --------------------------------------------------------------------------

def trajectory_suite(cfg: ExperimentConfig) -> dict:
    """Named trajectories in a fixed order: the training one first, then the tests."""
    return {"train": cfg.train_trajectory, **cfg.test_trajectories}


def run_training(cfg: ExperimentConfig, seed: int, out_dir=None):
    """Train one seed; with ``out_dir`` write checkpoints and the training log there."""
    step_log = [] if out_dir is not None else None
    pi, episodes, learner = train(cfg.trainer, cfg.plant, cfg.train_trajectory, seed, cfg.gctc.box,
                                  cfg.gctc.eps, cfg.gctc.initial, step_log)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "policy.json", policy_to_dict(pi, cfg.gctc.box, cfg.gctc.eps))
        for i, critic in enumerate(learner.critics, start=1):
            mlp.save(critic, out / f"critic{i}.json")
        write_csv(out / "training_log.csv", LOG_SCHEMA, LOG_COLUMNS, step_log)
        write_json(out / "training_summary.json", {"seed": seed, "episodes": episodes})
    return pi, episodes, learner


def build_controller(kind: str, cfg: ExperimentConfig, policy: PolicyParams | None = None,
                     box: ConstraintBox | None = None, eps: float | None = None):
    """Controller of the given kind; ``policy`` is the learned gray-box parameters, if any."""
    ev = cfg.evaluation
    box = cfg.gctc.box if box is None else box
    eps = cfg.gctc.eps if eps is None else eps
    if kind == "kinematic":
        return KinematicController(cfg.kinematic.gains, cfg.plant, period=cfg.kinematic.period)
    if kind == "ctc":
        alpha, beta = cfg.ctc.alpha, cfg.ctc.beta
        if cfg.ctc.share_learned_gains and policy is not None:
            alpha, beta = policy.alpha, policy.beta
        return ComputedTorqueController.exact(cfg.plant, alpha, beta, eps, period=ev.control_period)
    if kind == "gctc":
        pi = cfg.gctc.initial if policy is None else policy
        return GrayBoxController(pi, box, eps, cfg.plant, period=ev.control_period)
    raise ConfigError(f"unknown controller {kind!r}; expected one of {CONTROLLERS}")


def evaluation_start(cfg: ExperimentConfig, spec: TrajectorySpec, seed: int, index: int):
    """Perturbed start state shared by every controller evaluated on trajectory ``index``."""
    rng = np.random.default_rng([seed, 100, index])
    ev = cfg.evaluation
    return start_state(spec, cfg.plant, rng, ev.start_pos_sigma, ev.start_heading_sigma)


def evaluate_controller(cfg: ExperimentConfig, controller, spec: TrajectorySpec, seed: int,
                        index: int) -> tuple[list, RunMetrics]:
    ev = cfg.evaluation
    tr = cfg.trainer
    rows = rollout(cfg.plant, spec, controller, ev.duration, evaluation_start(cfg, spec, seed, index),
                   dt=ev.plant_dt, log_period=ev.log_period, weights=(tr.He, tr.Hu))
    return rows, metrics(rows)


def run_evaluation(cfg: ExperimentConfig, kind: str, seed: int, policy=None, out_dir=None) -> dict:
    """Evaluate one controller on every trajectory of the suite; returns name -> RunMetrics."""
    box = eps = None
    if isinstance(policy, tuple):
        policy, box, eps = policy
    results = {}
    for index, (name, spec) in enumerate(trajectory_suite(cfg).items()):
        controller = build_controller(kind, cfg, policy, box, eps)
        rows, m = evaluate_controller(cfg, controller, spec, seed, index)
        results[name] = m
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_csv(Path(out_dir) / f"eval_{kind}_{name}.csv", TRACE_SCHEMA, TRACE_COLUMNS, rows)
    if out_dir is not None:
        write_json(Path(out_dir) / f"metrics_{kind}.json",
                   {"controller": kind, "seed": seed, "metrics": {n: m.to_dict() for n, m in results.items()}})
    return results


def run_comparison(cfg: ExperimentConfig, seeds=None, policies: dict | None = None) -> dict:
    """Metrics for every (seed, controller, test trajectory).

    ``policies`` maps seed -> learned :class:`PolicyParams`; seeds without an
    entry are trained first.  Returns ``{seed: {controller: {trajectory: RunMetrics}}}``.
    """
    seeds = cfg.seeds if seeds is None else tuple(seeds)
    policies = dict(policies or {})
    suite = trajectory_suite(cfg)
    names = list(cfg.test_trajectories)
    out = {}
    for seed in seeds:
        if seed not in policies:
            policies[seed] = run_training(cfg, seed)[0]
        per = {}
        for kind in CONTROLLERS:
            per[kind] = {}
            for name in names:
                index = list(suite).index(name)
                controller = build_controller(kind, cfg, policies[seed])
                per[kind][name] = evaluate_controller(cfg, controller, suite[name], seed, index)[1]
        out[seed] = per
    return out


def median_table(results: dict, field_name: str = "rms_pos_err") -> dict:
    """``{controller: {trajectory: median over seeds}}``."""
    seeds = list(results)
    table = {}
    for kind in results[seeds[0]]:
        table[kind] = {}
        for name in results[seeds[0]][kind]:
            vals = [getattr(results[s][kind][name], field_name) for s in seeds]
            table[kind][name] = float(np.median(vals))
    return table


def format_table(table: dict, title: str = "median rms_pos_err [m]") -> str:
    kinds = list(table)
    names = list(table[kinds[0]])
    width = max(len(n) for n in names + ["trajectory"]) + 2
    lines = [title, "trajectory".ljust(width) + "".join(k.rjust(12) for k in kinds)]
    for name in names:
        lines.append(name.ljust(width) + "".join(f"{table[k][name]:12.5f}" for k in kinds))
    return "\n".join(lines) + "\n"


def write_comparison(results: dict, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fields = ("rms_pos_err", "max_pos_err", "rms_heading_err", "control_effort")
    medians = {f: median_table(results, f) for f in fields}
    per_seed = {str(s): {k: {n: m.to_dict() for n, m in v.items()} for k, v in res.items()}
                for s, res in results.items()}
    write_json(out / "compare.json", {"seeds": [int(s) for s in results], "median": medians, "per_seed": per_seed})
    text = "\n".join(format_table(medians[f], f"median {f}") for f in fields)
    (out / "compare.txt").write_text(text)
    return medians


def run_simulation(cfg: ExperimentConfig, trajectory: str, controller: str, seed: int,
                   torque=(0.0, 0.0), policy=None, duration: float | None = None):
    """Single rollout with an open-loop torque or a fixed controller."""
    suite = trajectory_suite(cfg)
    if trajectory not in suite:
        raise ConfigError(f"unknown trajectory {trajectory!r}; expected one of {list(suite)}")
    ev = cfg.evaluation
    if controller == "open_loop":
        ctrl = ConstantTorque(torque, period=ev.control_period)
    else:
        box = eps = None
        if isinstance(policy, tuple):
            policy, box, eps = policy
        ctrl = build_controller(controller, cfg, policy, box, eps)
    index = list(suite).index(trajectory)
    tr = cfg.trainer
    rows = rollout(cfg.plant, suite[trajectory], ctrl, ev.duration if duration is None else duration,
                   evaluation_start(cfg, suite[trajectory], seed, index),
                   dt=ev.plant_dt, log_period=ev.log_period, weights=(tr.He, tr.Hu))
    return rows
