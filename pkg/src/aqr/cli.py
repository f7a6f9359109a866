"""Command-line front end: ``aqr fit | simulate | table1 | table2 | qq | bandwidth-sweep``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .backfit import AdditiveFit, Dataset, FitConfig, fit_quantile
from .simulation import (
    BenchConfig,
    SimModel,
    gen_covariates,
    gen_response,
    qq_data,
    qq_correlation,
    replication_rng,
    run_benchmark,
)

log = logging.getLogger("aqr")

ALL_METHODS = ("BF", "SBF_grid", "SBF_pseudo", "BF_star", "SBF_star")


class CLIError(Exception):
    pass


# -- io ---------------------------------------------------------------------

def read_numeric_csv(path) -> tuple[list[str], np.ndarray]:
    """Header plus a float matrix; errors name the offending row and column."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise CLIError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CLIError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CLIError(
                    f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}"
                )
            values = []
            for col, cell in enumerate(row, start=1):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise CLIError(
                        f"{path}: row {lineno}, column {col}: non-numeric value {cell!r}"
                    ) from None
            rows.append(values)
    if not rows:
        raise CLIError(f"{path}: no data rows")
    return header, np.array(rows)


def read_table(path) -> tuple[list[str], list[list]]:
    """Header plus rows of any CSV this tool writes; numeric cells become floats."""
    def cell(text):
        try:
            return float(text)
        except ValueError:
            return text

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [[cell(c) for c in row] for row in reader if row]


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for v in row])


def write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_curves(path, fit: AdditiveFit) -> None:
    rows = [(j + 1, float(x), float(v))
            for j, (g, c) in enumerate(zip(fit.grids, fit.components))
            for x, v in zip(g, c)]
    write_rows(path, ["component", "x", "value"], rows)


# -- argument types ---------------------------------------------------------

def probability(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in (0, 1)")
    return value


def positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"{text} is not positive")
    return value


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text} is not a positive integer")
    return value


def intervals(text: str) -> list[tuple[float, float]]:
    """Parse ``a1:b1,a2:b2,...``."""
    out = []
    for part in text.split(","):
        try:
            a, b = (float(t) for t in part.split(":"))
        except ValueError:
            raise argparse.ArgumentTypeError(
                f"interval {part!r} is not of the form a:b") from None
        if not a < b:
            raise argparse.ArgumentTypeError(f"interval {part!r} is empty")
        out.append((a, b))
    return out


def default_seed() -> int:
    env = os.environ.get("AQR_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CLIError(f"AQR_SEED must be an integer, got {env!r}") from None


def _fit_config(args) -> FitConfig:
    return FitConfig(grid_size=args.grid_size, max_cycles=args.max_cycles,
                     tol=args.tol, pseudo_J=args.pseudo_J)


# -- commands ---------------------------------------------------------------

def cmd_fit(args) -> int:
    header, table = read_numeric_csv(args.csv)
    if table.shape[1] < 2:
        raise CLIError(f"{args.csv}: need a response column and at least one covariate")
    y, x = table[:, 0], table[:, 1:]
    d = x.shape[1]
    intervals = args.intervals
    if intervals is not None and len(intervals) != d:
        raise CLIError(f"--intervals needs {d} entries, got {len(intervals)}")
    h = args.bandwidth
    if len(h) not in (1, d):
        raise CLIError(f"--bandwidth needs 1 or {d} values, got {len(h)}")
    method = args.method or ("SBF_grid" if d <= 3 else "SBF_pseudo")
    data = Dataset.from_arrays(y, x, intervals)
    fit = fit_quantile(method, data, args.alpha, h if len(h) == d else h * d,
                       _fit_config(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fit.json").write_text(fit.to_json(indent=2) + "\n", encoding="utf-8")
    write_curves(out / "components.csv", fit)
    names = header[1:]
    print(f"method={fit.method} alpha={fit.alpha} n={data.n} d={d} "
          f"covariates={','.join(names)}")
    print(f"converged={str(fit.converged).lower()} cycles={fit.iterations_run} "
          f"m0={fit.m0:.6g}")
    return 0


def cmd_simulate(args) -> int:
    rng = replication_rng(args.seed, 0)
    x = gen_covariates(args.n, args.correlated, rng)
    y, _ = gen_response(x, rng, SimModel(args.correlated))
    write_rows(args.out, ["y", "x1", "x2", "x3"],
               [(float(a), *map(float, b)) for a, b in zip(y, x)])
    return 0


def _designs(choice: str) -> list[bool]:
    return {"uncorrelated": [False], "correlated": [True], "both": [False, True]}[choice]


def _bench_configs(args, methods):
    base = FitConfig(grid_size=args.grid_size, max_cycles=args.max_cycles, tol=args.tol,
                     pseudo_J=args.pseudo_J)
    for n in args.n:
        for correlated in _designs(args.design):
            yield BenchConfig(n=n, alpha_levels=tuple(args.alpha), replications=args.reps,
                              bandwidth_grid=tuple(args.h_grid), methods=tuple(methods),
                              seed=args.seed, eval_points=args.eval_points,
                              correlated=correlated, fit_config=base, jobs=args.jobs)


def _cell_name(cfg: BenchConfig) -> str:
    return f"n{cfg.n}_{'correlated' if cfg.correlated else 'uncorrelated'}"


def _run_tables(args, methods, table: str) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layout: dict = {"mise": {}, "mise_per_volume": {}, "optimal_h": {}, "diff": {}}
    cells = []
    for cfg in _bench_configs(args, methods):
        log.info("running %s", _cell_name(cfg))
        report = run_benchmark(cfg)
        report.write_csv(out / f"ise_{_cell_name(cfg)}.csv")
        summary = report.summary()
        cells.append(summary)
        design = summary["design"]
        for key in ("mise", "mise_per_volume", "optimal_h", "diff"):
            if key in summary:
                layout[key].setdefault(f"n={cfg.n}", {})[design] = summary[key]
    doc = {"table": table, "seed": args.seed, "replications": args.reps,
           "bandwidth_grid": list(args.h_grid), **layout, "cells": cells}
    if table == "2":
        doc = {k: doc[k] for k in ("table", "seed", "replications", "bandwidth_grid",
                                   "diff", "cells")}
    write_json(out / f"table{table}.json", doc)
    print(json.dumps(layout["mise_per_volume" if table == "1" else "diff"], indent=2,
                     sort_keys=True))
    return 0


def cmd_table1(args) -> int:
    return _run_tables(args, args.methods, "1")


def cmd_table2(args) -> int:
    sbf = "SBF_grid" if "SBF_pseudo" not in args.methods else "SBF_pseudo"
    return _run_tables(args, ["BF", sbf], "2")


def cmd_qq(args) -> int:
    cfg = BenchConfig(n=args.n[0], alpha_levels=(args.alpha[0],), replications=args.reps,
                      bandwidth_grid=(args.h,), methods=(args.method,), seed=args.seed,
                      eval_points=args.eval_points, correlated=args.design == "correlated",
                      fit_config=_fit_config(args),
                      qq_targets=((args.component - 1, args.point),), jobs=args.jobs)
    report = run_benchmark(cfg)
    values = report.qq_values[args.method, args.alpha[0], args.h, args.component - 1,
                              args.point]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "qq.csv", ["theoretical", "sample"], qq_data(values))
    write_rows(out / "qq_values.csv", ["rep", "value"], list(zip(report.reps, values)))
    r = qq_correlation(values)
    write_json(out / "qq.json", {"method": args.method, "alpha": args.alpha[0],
                                 "h": args.h, "component": args.component,
                                 "point": args.point, "replications": len(values),
                                 "qq_correlation": r})
    print(f"qq_correlation={r:.6f}")
    return 0


def cmd_bandwidth_sweep(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, optimum = [], {}
    for cfg in _bench_configs(args, args.methods):
        report = run_benchmark(cfg)
        for m in cfg.methods:
            for a in cfg.alpha_levels:
                for h in cfg.bandwidth_grid:
                    rows.append((cfg.n, "correlated" if cfg.correlated else "uncorrelated",
                                 m, float(a), float(h), report.mise(m, a, h)))
                scores = [report.mise(m, a, h) for h in cfg.bandwidth_grid]
                best = cfg.bandwidth_grid[int(np.argmin(scores))]
                optimum.setdefault(_cell_name(cfg), {}).setdefault(m, {})[str(a)] = best
    write_rows(out / "mise_vs_h.csv", ["n", "design", "method", "alpha", "h", "mise"], rows)
    write_json(out / "optimal_h.json", optimum)
    print(json.dumps(optimum, indent=2, sort_keys=True))
    return 0


# -- parser -----------------------------------------------------------------

def _add_fit_options(p):
    p.add_argument("--grid-size", type=positive_int, default=41)
    p.add_argument("--max-cycles", type=positive_int, default=50)
    p.add_argument("--tol", type=positive_float, default=1e-4)
    p.add_argument("--pseudo-J", dest="pseudo_J", type=positive_int, default=10)


def _add_bench_options(p, methods_default):
    p.add_argument("--n", type=positive_int, nargs="+", default=[200])
    p.add_argument("--design", choices=["uncorrelated", "correlated", "both"],
                   default="uncorrelated")
    p.add_argument("--correlated", dest="design", action="store_const", const="correlated",
                   help="shorthand for --design correlated")
    p.add_argument("--alpha", type=probability, nargs="+", default=[0.2, 0.5, 0.8])
    p.add_argument("--reps", type=positive_int, default=200)
    p.add_argument("--h-grid", type=positive_float, nargs="+",
                   default=[0.3, 0.4, 0.5, 0.6, 0.7])
    p.add_argument("--methods", nargs="+", choices=ALL_METHODS, default=methods_default)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-points", type=positive_int, default=5000)
    p.add_argument("--jobs", type=positive_int, default=os.cpu_count() or 1)
    p.add_argument("--out-dir", default=".")
    _add_fit_options(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aqr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit an additive quantile model to a CSV file")
    p.add_argument("csv", help="CSV with header; first column y, then x1..xd")
    p.add_argument("--alpha", type=probability, default=0.5)
    p.add_argument("--bandwidth", type=positive_float, nargs="+", required=True)
    p.add_argument("--method", choices=["BF", "SBF_grid", "SBF_pseudo"])
    p.add_argument("--intervals", type=intervals,
                   help="supports as a1:b1,a2:b2,... (default: data range); "
                        "write --intervals=-1:1,... for negative bounds")
    p.add_argument("--out-dir", default=".")
    _add_fit_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="write a sample from the simulation model")
    p.add_argument("--n", type=positive_int, default=200)
    p.add_argument("--correlated", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("table1", help="MISE of all estimators at optimal bandwidths")
    _add_bench_options(p, ["BF", "SBF_grid", "BF_star", "SBF_star"])
    p.set_defaults(func=cmd_table1)

    p = sub.add_parser("table2", help="paired ISE differences between BF and SBF")
    _add_bench_options(p, ["BF", "SBF_grid"])
    p.set_defaults(func=cmd_table2)

    p = sub.add_parser("qq", help="normal Q-Q data of a fitted component value")
    _add_bench_options(p, ["SBF_grid"])
    p.set_defaults(func=cmd_qq, alpha=[0.5], n=[200])
    p.add_argument("--method", choices=ALL_METHODS, default="SBF_grid")
    p.add_argument("--h", type=positive_float, default=0.5)
    p.add_argument("--component", type=int, choices=[1, 2, 3], default=2)
    p.add_argument("--point", type=float, default=0.0)

    p = sub.add_parser("bandwidth-sweep", help="MISE as a function of the bandwidth")
    _add_bench_options(p, ["BF", "SBF_grid"])
    p.set_defaults(func=cmd_bandwidth_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "seed", 0) is None:
            args.seed = default_seed()
        return args.func(args)
    except (CLIError, ValueError, RuntimeError) as exc:
        print(f"aqr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
