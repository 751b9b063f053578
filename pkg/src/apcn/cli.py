"""Command-line front end: ``apcn run|compare|summarize|basis``.

Exit codes: 0 success, 1 runtime failure (stage named on stderr),
2 config error (field named on stderr).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .experiment import (ConfigError, StageError, compare_runs, load_config, resummarize, run_experiment,
                         spectrum_report, validate)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _apply_overrides(cfg, args):
    if getattr(args, "seed_override", None) is not None:
        cfg.seeds = dataclasses.replace(cfg.seeds, chain=args.seed_override)
    if getattr(args, "thin", None) is not None:
        cfg.output.thin = args.thin
    if getattr(args, "lag", None) is not None:
        cfg.output.lag = args.lag
    validate(cfg)
    return cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = run_experiment(cfg, out_dir=args.out, progress=args.progress)
    print(out)
    return EXIT_OK


def cmd_basis(args) -> int:
    cfg = load_config(args.config)
    alphas, frac, J = spectrum_report(cfg, args.show)
    print("j,alpha,cumulative_fraction")
    for j, (a, f) in enumerate(zip(alphas, frac), start=1):
        print(f"{j},{float(a)!r},{float(f)!r}")
    print(f"J={J} (rho={cfg.sampler.rho})")
    return EXIT_OK


def cmd_summarize(args) -> int:
    info = resummarize(args.archive, lag=args.lag, burn_in=args.burn_in)
    for key in sorted(info):
        print(f"{key}: {info[key]}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cmp = compare_runs(args.archive_a, args.archive_b, lag=args.lag)
    out = Path(args.out) if args.out else Path(args.archive_a) / f"compare_{Path(args.archive_b).name}.csv"
    cmp.write_csv(out)
    print(f"dominance_fraction: {cmp.dominance!r}")
    print(f"mean_ess_a: {cmp.ess_a.mean()!r}")
    print(f"mean_ess_b: {cmp.ess_b.mean()!r}")
    print(f"table: {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apcn", description="Adaptive pCN experiment runner")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config and write its archive")
    p.add_argument("config")
    p.add_argument("--out", help="archive directory (default: output.dir from the config)")
    p.add_argument("--seed-override", type=int, help="replace the chain seed")
    p.add_argument("--thin", type=int)
    p.add_argument("--lag", type=int)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="per-grid-point ESS/ACF of two archives")
    p.add_argument("archive_a")
    p.add_argument("archive_b")
    p.add_argument("--lag", type=int)
    p.add_argument("--out", help="CSV path (default: inside archive_a)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("summarize", help="recompute the diagnostics of an archive")
    p.add_argument("archive")
    p.add_argument("--lag", type=int)
    p.add_argument("--burn-in", type=int)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("basis", help="print the KL spectrum and the selected J")
    p.add_argument("config")
    p.add_argument("--show", type=int, default=20)
    p.set_defaults(func=cmd_basis)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error in '{exc.field}': {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"runtime failure in stage '{exc.stage}': {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
