"""Command-line harness.

Subcommands:

* ``train --config FILE [--seed N] [--out DIR]`` - one training run.
* ``sweep --spec FILE --out DIR [--jobs N]`` - hyperparameter sweep.
* ``analyze --run DIR --kind KIND [--out FILE]`` - tidy plot-data CSV.
* ``verify-dynamics [--trials N] [--seed N]`` - property suite for the
  weight-norm dynamics.

Exit codes: 0 success, 1 verification failure, 2 config error,
3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import sys

from .config import load_config, load_sweep_spec
from .errors import ConfigError, DataFormatError, NumericalAbortError

__all__ = ["main"]


def _cmd_train(args) -> int:
    from .runner import run_experiment

    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    out = args.out or f"runs/{cfg.name}-s{seed}"
    summary = run_experiment(cfg, out, seed_override=args.seed)
    print(f"run {summary['run_id']}: {summary['steps']} steps, "
          f"final test acc {summary['final_test_acc']}")
    print(f"metrics: {out}/metrics.csv")
    return 0


def _cmd_sweep(args) -> int:
    from .runner import run_sweep

    spec = load_sweep_spec(args.spec)
    result = run_sweep(spec, args.out, jobs=args.jobs)
    n_failed = sum(r["n_failed"] for r in result["cells"])
    print(f"sweep: {len(result['cells'])} cells, {n_failed} failed runs")
    print(f"aggregate: {result['csv']}")
    return 0


def _cmd_analyze(args) -> int:
    import os

    from .runner import emit_plotdata

    out = args.out or os.path.join(args.run, f"plot_{args.kind}.csv")
    rows = emit_plotdata(args.run, args.kind, out)
    print(f"{len(rows)} rows -> {out}")
    return 0


def _cmd_verify(args) -> int:
    from .verify import run_checks

    results = run_checks(trials=args.trials, seed=args.seed)
    failed = 0
    for r in results:
        status = "PASS" if r["ok"] else "FAIL"
        print(f"[{status}] {r['name']}: worst {r['worst']:.3e} (bound {r['bound']:.0e})")
        failed += 0 if r["ok"] else 1
    if failed:
        print(f"{failed} check(s) failed")
        return 1
    print(f"all {len(results)} dynamics checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bnwrs",
        description="Train batch-normalized networks with weight decay or "
                    "weight rescaling and analyze their weight-norm dynamics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training experiment")
    p_train.add_argument("--config", required=True, help="JSON or TOML experiment config")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--out", default=None, help="output directory")
    p_train.set_defaults(func=_cmd_train)

    p_sweep = sub.add_parser("sweep", help="run a hyperparameter sweep")
    p_sweep.add_argument("--spec", required=True, help="JSON or TOML sweep spec")
    p_sweep.add_argument("--out", required=True, help="output directory")
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_analyze = sub.add_parser("analyze", help="emit tidy plot data from a run")
    p_analyze.add_argument("--run", required=True, help="run (or sweep) directory")
    p_analyze.add_argument("--kind", required=True,
                           choices=["norm_traj", "acc_vs_hyper", "beta_profile",
                                    "overfit_compare"])
    p_analyze.add_argument("--out", default=None, help="output CSV path")
    p_analyze.set_defaults(func=_cmd_analyze)

    p_verify = sub.add_parser("verify-dynamics",
                              help="check the weight-norm dynamics properties")
    p_verify.add_argument("--trials", type=int, default=100)
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.set_defaults(func=_cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        if exc.last_good_snapshot:
            print(f"last good snapshot: {exc.last_good_snapshot}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
