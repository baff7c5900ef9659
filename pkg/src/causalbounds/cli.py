"""Command line entry point: ``causalbounds {generate,bounds,oracle,plot}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields

import numpy as np

from . import scm
from .pipeline import ConfigError, RunConfig, curve_from_summary, load_config, make_grid, run_bounds, write_outputs
from .plot import emit_svg_plot

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 1, 2


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    for f in fields(RunConfig):
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        parser.add_argument(*names, dest=f.name, default=None, metavar=f.name.upper(),
                            help=f"overrides the config file (default {getattr(RunConfig(), f.name)!r})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causalbounds", description="Bounds on E[Y | do(X = x*)].")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample a synthetic dataset to CSV")
    g.add_argument("--dataset", required=True, help=f"one of {', '.join(scm.SCM_NAMES)}")
    g.add_argument("--n", type=int, default=10_000)
    g.add_argument("--data-seed", "--data_seed", dest="data_seed", type=int, default=0)
    g.add_argument("--confounding", type=float, default=1.0)
    g.add_argument("--out", required=True)

    b = sub.add_parser("bounds", help="run the full bounding pipeline")
    b.add_argument("--config", help="flat 'key = value' file")
    _add_run_flags(b)

    o = sub.add_parser("oracle", help="true interventional means on an x* grid")
    o.add_argument("--config", help="flat 'key = value' file")
    _add_run_flags(o)
    o.add_argument("--out", help="CSV path (stdout if omitted)")

    p = sub.add_parser("plot", help="re-render an SVG from summary.json")
    p.add_argument("--summary", required=True)
    p.add_argument("--out", required=True)
    return parser


def _run_config(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    return load_config(args.config, **overrides)


def cmd_generate(args) -> int:
    data = scm.generate(args.dataset, args.n, args.data_seed, args.confounding)
    scm.write_csv(data, args.out)
    print(f"wrote {data.n} rows to {args.out}")
    return EXIT_OK


def cmd_bounds(args) -> int:
    config = _run_config(args)
    run = run_bounds(config)
    out = write_outputs(run)
    curve = run.curve
    for x, lo, hi in zip(curve.varied, curve.lower, curve.upper):
        print(f"x*={x:+.3f}  lower={'missing' if lo is None else f'{lo:.4f}'}  "
              f"upper={'missing' if hi is None else f'{hi:.4f}'}")
    if curve.true_effect is not None:
        print(f"true effect contained at every grid point: {curve.contains_truth()}")
    print(f"outputs in {out}")
    if all(lo is None or hi is None for lo, hi in zip(curve.lower, curve.upper)):
        print("no grid point has both bounds: every run was infeasible", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_oracle(args) -> int:
    config = _run_config(args)
    name = scm.canonical_name(config.dataset)
    data = scm.generate(name, config.n, config.data_seed, config.confounding)
    grid = make_grid(config, data.x)
    truth = np.atleast_1d(scm.true_effect(name, grid))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow([f"x_star_{i + 1}" for i in range(grid.shape[1])] + ["true_effect"])
        for x, t in zip(grid, truth):
            w.writerow([repr(float(v)) for v in x] + [repr(float(t))])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_plot(args) -> int:
    with open(args.summary) as fh:
        curve = curve_from_summary(json.load(fh))
    emit_svg_plot(curve, args.out)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"generate": cmd_generate, "bounds": cmd_bounds, "oracle": cmd_oracle, "plot": cmd_plot}[args.command]
    try:
        return handler(args)
    except (ConfigError, KeyError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
