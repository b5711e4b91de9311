"""Command line entry point: ``artreplay {run,couple,gen-history,validate}``."""

from __future__ import annotations

import argparse
import sys

from artreplay import harness
from artreplay.model import ConfigError, IngestionError, InvariantViolation

EXIT_INVALID = 1
EXIT_VIOLATION = 2


def cmd_run(args) -> int:
    cfg = harness.ScenarioConfig.from_file(args.config)
    table = harness.run_scenario(cfg, args.out)
    for (alg, meta), by_seed in table.items():
        metrics = harness.final_metrics(by_seed)
        mean, se = harness.mean_se(metrics["regret"])
        print(f"{alg:>13} {meta:>17}  regret {mean:10.3f} +- {se:.3f}")
    return 0


def cmd_couple(args) -> int:
    cfg = harness.ScenarioConfig.from_file(args.config)
    ok = True
    for alg, summary in harness.couple_scenario(cfg, require_iidata=not args.allow_non_iidata).items():
        n = len(summary.per_seed)
        print(f"{alg}: {'PASS' if summary.passed else 'FAIL'} ({n - len(summary.divergent)}/{n} seeds identical)")
        for seed in summary.divergent:
            print(f"  seed {seed}: {summary.per_seed[seed]}")
        ok &= summary.passed
    return 0 if ok or args.allow_non_iidata else EXIT_VIOLATION


def cmd_gen_history(args) -> int:
    cfg = harness.ScenarioConfig.from_file(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    _, inst = harness.build_env(cfg, seed)
    hist = harness.scenario_history(cfg, seed, inst)
    hist.to_csv(args.out)
    print(f"wrote {len(hist)} entries to {args.out}")
    return 0


def cmd_validate(args) -> int:
    bad = 0
    for path in args.csv:
        problems = harness.validate_csv(path)
        for p in problems:
            print(p)
        bad += bool(problems)
        if not problems:
            print(f"{path}: ok")
    return EXIT_VIOLATION if bad else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="artreplay", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and write metrics CSVs")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("couple", help="check Artificial Replay against Full Start on every seed")
    p.add_argument("--config", required=True)
    p.add_argument("--allow-non-iidata", action="store_true",
                   help="also run algorithms without the IIData property and only report divergences")
    p.set_defaults(fn=cmd_couple)

    p = sub.add_parser("gen-history", help="write the scenario's historical dataset as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gen_history)

    p = sub.add_parser("validate", help="check a metrics CSV for monotonicity and consistency")
    p.add_argument("--csv", required=True, nargs="+")
    p.set_defaults(fn=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except (ConfigError, IngestionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
