"""
Command-line entry point: ``gctc {train,evaluate,compare,simulate}``.

Exit codes::

    0  success
    1  unexpected internal error
    2  bad command-line usage
    3  missing configuration key
    4  unknown configuration key
    5  invalid configuration value or unreadable input file
    6  training diverged
    7  plant integration failed

On failure one JSON error record is written to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import harness
from .errors import ConfigError, DivergenceError, IntegrationError, MissingKeyError, UnknownKeyError

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING_KEY = 3
EXIT_UNKNOWN_KEY = 4
EXIT_INVALID = 5
EXIT_DIVERGENCE = 6
EXIT_INTEGRATION = 7

# most specific first
_ERROR_CODES = (
    (MissingKeyError, "missing_key", EXIT_MISSING_KEY),
    (UnknownKeyError, "unknown_key", EXIT_UNKNOWN_KEY),
    (ConfigError, "invalid_config", EXIT_INVALID),
    (DivergenceError, "divergence", EXIT_DIVERGENCE),
    (IntegrationError, "integration_failure", EXIT_INTEGRATION),
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _report("usage", message, EXIT_USAGE)
        sys.exit(EXIT_USAGE)


def _report(kind: str, message: str, code: int) -> None:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gctc", description="Gray-box computed-torque control experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", required=True, type=Path, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None, help="seed (default: every seed in the config)")
        p.add_argument("--out", type=Path, default=None,
                       help=f"output directory (default: ${harness.OUTPUT_DIR_ENV} or the config's output_dir)")

    p = sub.add_parser("train", help="train the gray-box policy")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes across seeds")

    p = sub.add_parser("evaluate", help="evaluate one controller on every trajectory")
    common(p)
    p.add_argument("--controller", choices=harness.CONTROLLERS, default="gctc")
    p.add_argument("--checkpoint", type=Path, default=None, help="policy.json written by train")

    p = sub.add_parser("compare", help="kinematic vs exact CTC vs gray-box on the test trajectories")
    common(p)
    p.add_argument("--checkpoints", type=Path, default=None,
                   help="directory of seed_<n>/policy.json from train; skips training")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes across seeds")

    p = sub.add_parser("simulate", help="single open-loop or fixed-controller rollout")
    common(p)
    p.add_argument("--trajectory", default="train", help="'train' or a test trajectory name")
    p.add_argument("--controller", choices=("open_loop", *harness.CONTROLLERS), default="open_loop")
    p.add_argument("--torque", type=float, nargs=2, default=(0.0, 0.0), metavar=("TAU_R", "TAU_L"),
                   help="constant wheel torques for open_loop")
    p.add_argument("--checkpoint", type=Path, default=None, help="policy.json for the gctc controller")
    p.add_argument("--duration", type=float, default=None, help="seconds (default: evaluation duration)")
    return parser


def _seeds(cfg, seed):
    return cfg.seeds if seed is None else (seed,)


def _train_one(args):
    cfg, seed, out = args
    _, episodes, _ = harness.run_training(cfg, seed, out)
    return seed, episodes


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def cmd_train(cfg, args, out: Path) -> None:
    items = [(cfg, s, out / f"seed_{s}") for s in _seeds(cfg, args.seed)]
    for seed, episodes in _map(_train_one, items, args.jobs):
        if not episodes:
            print(f"seed {seed}: no episodes")
            continue
        first, last = episodes[0], episodes[-1]
        print(f"seed {seed}: reward {first['cumulative_reward']:.1f} -> {last['cumulative_reward']:.1f}, "
              f"alpha={last['alpha']:.3f} beta={last['beta']:.3f}")


def cmd_evaluate(cfg, args, out: Path) -> None:
    policy = harness.load_policy(args.checkpoint) if args.checkpoint else None
    seed = cfg.seeds[0] if args.seed is None else args.seed
    results = harness.run_evaluation(cfg, args.controller, seed, policy, out)
    for name, m in results.items():
        print(f"{name}: rms_pos_err={m.rms_pos_err:.5f} m  max={m.max_pos_err:.5f} m  "
              f"rms_heading={m.rms_heading_err:.5f} rad")


def _compare_one(args):
    cfg, seed, policy = args
    policies = {seed: policy} if policy is not None else None
    return harness.run_comparison(cfg, (seed,), policies)


def cmd_compare(cfg, args, out: Path) -> None:
    seeds = _seeds(cfg, args.seed)
    policies = {}
    if args.checkpoints is not None:
        for s in seeds:
            path = args.checkpoints / f"seed_{s}" / "policy.json"
            if not path.is_file():
                raise ConfigError(f"no checkpoint for seed {s} at {path}")
            policies[s] = harness.load_policy(path)[0]
    results = {}
    for part in _map(_compare_one, [(cfg, s, policies.get(s)) for s in seeds], args.jobs):
        results.update(part)
    harness.write_comparison(results, out)
    print((out / "compare.txt").read_text(), end="")


def cmd_simulate(cfg, args, out: Path) -> None:
    policy = harness.load_policy(args.checkpoint) if args.checkpoint else None
    seed = cfg.seeds[0] if args.seed is None else args.seed
    rows = harness.run_simulation(cfg, args.trajectory, args.controller, seed, args.torque, policy, args.duration)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"simulate_{args.controller}_{args.trajectory}.csv"
    harness.write_csv(path, harness.TRACE_SCHEMA, harness.TRACE_COLUMNS, rows)
    print(path)


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "compare": cmd_compare, "simulate": cmd_simulate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = harness.load_config(args.config)
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        out = harness.resolve_output_dir(cfg, args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args, out)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        for cls, kind, code in _ERROR_CODES:
            if isinstance(exc, cls):
                _report(kind, str(exc), code)
                return code
        _report("internal", f"{type(exc).__name__}: {exc}", EXIT_INTERNAL)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
