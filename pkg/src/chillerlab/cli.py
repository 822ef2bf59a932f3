"""Command-line entry point: ``chillerlab <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 acceptance threshold missed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import trajectory as tj
from .config import ConfigError, load_config, load_reference_config
from .critic import CriticHParams, load, save, train
from .dataset import build_targets, clean, filter_ai_only, masks_from_config
from .harness import (AbSchedule, NoComparableConditions, ab_profile, aggregated_metric, bucketed_savings,
                      chiller_toggles, constraint_report, cumulative_savings, load_unit_tests,
                      reference_unit_tests_path, run_ab, run_unit_tests, soo_trajectory)
from .plant import SimParams
from .policy import act, initial_heuristic_state

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config(args):
    return load_config(args.config) if args.config else load_reference_config()


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def cmd_simulate(args) -> int:
    config = _config(args)
    traj = soo_trajectory(config, SimParams(), args.seed, args.days)
    tj.write_csv(traj, args.out, config)
    print(f"wrote {len(traj)} rows to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config(args)
    raw = tj.read_csv(_existing(args.data), config)
    cleaned, _ = clean(raw, config)
    examples = build_targets(filter_ai_only(cleaned, enabled=not args.all_controllers), config)
    hp = CriticHParams(epochs=args.epochs, seed=args.seed)
    model = train(examples, masks_from_config(config, monolithic=args.monolithic), hp)
    save(model, args.out)
    print(f"trained on {len(examples)} examples; final loss {float(np.mean(model.history[-1])):.4g}; wrote {args.out}")
    return EXIT_OK


def cmd_ab_test(args) -> int:
    config = _config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    settings = ab_profile(args.seed)
    if args.epochs:
        settings.critic = CriticHParams(epochs=args.epochs, seed=args.seed)
    result = run_ab(args.seed, AbSchedule(days=args.days), config, SimParams(), settings,
                    progress=lambda d, c: logging.info("day %d: %s", d, c))
    tj.write_csv(result.rows, out / "experiment_log.csv", config)
    result.decisions.to_csv(out / "decisions.csv", index=False)
    savings = bucketed_savings(result.rows)
    savings.table.to_csv(out / "buckets.csv", index=False)
    report = constraint_report(result.rows, config)
    report.to_csv(out / "constraints.csv")
    cumulative_savings(result.rows).to_csv(out / "cumulative_savings.csv", index=False)
    toggles = chiller_toggles(result.rows)
    toggles.to_csv(out / "chiller_toggles.csv", index=False)
    print(f"overall savings: {100 * savings.overall:.2f}%")
    print(f"kick-outs: {len(result.kick_outs)}")
    print(f"chiller toggles: {len(toggles)}, closest spacing {toggles['since_previous'].min()} min")
    print(report.T.to_string(float_format=lambda v: f"{v:.4f}"))
    if args.min_savings is not None and 100 * savings.overall < args.min_savings:
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_unit_test(args) -> int:
    config = _config(args)
    model = load(_existing(args.model))
    tests = load_unit_tests(_existing(args.tests) if args.tests else reference_unit_tests_path())
    results = run_unit_tests(model, tests, config)
    for r in results:
        print(f"{r.test.name}: predicted {[round(x, 4) for x in r.predicted]} "
              f"expected {[round(x, 4) for x in r.expected]} error {r.mean_error:.4f}")
    metric = aggregated_metric(results)
    print(f"aggregated metric: {metric:.6f}")
    if args.max_metric is not None and metric > args.max_metric:
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_clean_data(args) -> int:
    config = _config(args)
    src = _existing(args.inp)
    raw = tj.read_csv(src, config)
    cleaned, report = clean(raw, config, lookback_steps=args.lookback)
    out = Path(args.out) if args.out else src.with_name(src.stem + ".clean.csv")
    tj.write_csv(cleaned, out, config)
    rep = Path(args.report) if args.report else out.with_suffix(".report.json")
    rep.write_text(report.to_json())
    print(f"wrote {out} and {rep}")
    return EXIT_OK


def cmd_explain(args) -> int:
    """Replay one logged decision and dump its full candidate table."""
    config = _config(args)
    model = load(_existing(args.model))
    log = tj.read_csv(_existing(args.log), config)
    hits = np.flatnonzero(log["timestamp"].to_numpy() == args.explain)
    if len(hits) == 0:
        raise UsageError(f"timestamp {args.explain} not in {args.log}")
    i = int(hits[0])
    state = {k: float(log.iloc[i][k]) for k in config.sensor_names}
    prev = log.iloc[i - 1] if i > 0 else log.iloc[i]
    prev_action = {k: float(prev[k]) for k in config.action_names}
    hs = initial_heuristic_state(config, state, None) if args.heuristic else None
    policy = ab_profile(args.seed).policy
    rng = np.random.default_rng([args.seed, 11, args.explain + 2**31])
    action, rec = act(state, prev_action, model, config, policy, hs, None, rng, t=args.explain, keep_table=True)
    rec.table.to_csv(args.out, index=False)
    print(json.dumps({k: v for k, v in rec.to_row().items()}, default=float, indent=1))
    print(f"wrote {len(rec.table)} candidates to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chillerlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="facility YAML (default: bundled reference facility)")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("simulate", cmd_simulate, "run the rule-based controller and log a trajectory")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--days", type=int, default=7)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train the ensemble critic on a trajectory CSV")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=CriticHParams.epochs)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--monolithic", action="store_true", help="one tower over all features")
    sp.add_argument("--all-controllers", action="store_true", help="also train on SOO rows")

    sp = add("ab-test", cmd_ab_test, "alternate AI and SOO days and report savings")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--days", type=int, default=28)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--out-dir", default="ab_out")
    sp.add_argument("--min-savings", type=float, default=None, help="exit 3 below this percentage")

    sp = add("unit-test", cmd_unit_test, "run model unit tests and print the aggregated metric")
    sp.add_argument("--model", required=True)
    sp.add_argument("--tests", help="unit-test YAML (default: bundled reference tests)")
    sp.add_argument("--max-metric", type=float, default=None, help="exit 3 above this value")

    sp = add("clean-data", cmd_clean_data, "clean a raw trajectory CSV")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out")
    sp.add_argument("--report")
    sp.add_argument("--lookback", type=int, default=3)

    sp = add("explain", cmd_explain, "dump the candidate table of one decision")
    sp.add_argument("--model", required=True)
    sp.add_argument("--log", required=True)
    sp.add_argument("--explain", type=int, required=True, metavar="T", help="timestamp (minutes)")
    sp.add_argument("--out", default="candidates.csv")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--heuristic", action="store_true", help="let the chiller heuristic pick the count")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"chillerlab: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, NoComparableConditions, ValueError, RuntimeError, OSError) as e:
        print(f"chillerlab: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
