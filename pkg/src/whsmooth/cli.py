"""Command-line front end: aggregate, fit, extrapolate, replicate.

File-driven workflows over the library: individual records come in as CSV,
fits leave as CSV plus JSON diagnostics and a state file that the
extrapolate command can extend later.  All numeric output uses 17
significant digits so files round-trip bitwise, and every command is
deterministic for a fixed seed (wall-clock measurements are only written
when explicitly requested).

Exit codes: 0 success, 2 input error, 3 convergence failure, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from .duration import (
    AggregatedExposure,
    aggregate_1d,
    aggregate_2d,
    read_aggregates_csv,
    read_records_csv,
    write_aggregates_csv,
)
from .errors import (
    ConvergenceError,
    DataInconsistencyError,
    InvalidParameterError,
    NumericalError,
    SelectionError,
    SingularSystemError,
)
from .extrapolation import (
    SmoothingState,
    build_embedding,
    credible_intervals_extended,
    extrapolate_constrained,
    extrapolate_unconstrained,
)
from .gaussian import credible_intervals
from .generalized import (
    newton_fit,
    select_lambda_outer,
    select_lambda_performance,
)
from .penalty import penalty_1d, penalty_2d
from .rank_reduction import select_lambda_reduced
from .simulator import EXPERIMENT_IDS, replicate_experiment

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3
EXIT_NUMERICAL = 4


def _fmt(v: float) -> str:
    return f"{float(v):.17g}"


def _parse_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = text.split("..")
        return int(lo), int(hi)
    except ValueError:
        raise InvalidParameterError(f"expected a range like A..B, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="whsmooth",
        description="Whittaker-Henderson graduation toolkit for 1D and 2D experience tables",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_agg = sub.add_parser("aggregate", help="aggregate individual records into d/e_c tables")
    p_agg.add_argument("--records", required=True, help="input CSV with header x[,z],t,delta")
    p_agg.add_argument("--dim", type=int, choices=(1, 2), help="expected dimension (checked against the file)")
    p_agg.add_argument("--x-min", type=int, required=True)
    p_agg.add_argument("--x-max", type=int, required=True)
    p_agg.add_argument("--z-min", type=int)
    p_agg.add_argument("--z-max", type=int)
    p_agg.add_argument("--out", default=".", help="output directory")

    p_fit = sub.add_parser("fit", help="smooth an aggregated table")
    p_fit.add_argument("--aggregates", required=True, help="input CSV with header x[,z],d,ec")
    p_fit.add_argument("--dim", type=int, choices=(1, 2))
    p_fit.add_argument("--q", type=int, default=2, help="difference order (1D, default 2)")
    p_fit.add_argument("--qx", type=int, help="difference order along x (2D, default 2)")
    p_fit.add_argument("--qz", type=int, help="difference order along z (2D, default 2)")
    p_fit.add_argument("--lambda", dest="lam", type=float, help="fixed smoothing parameter (1D)")
    p_fit.add_argument("--lambda-x", dest="lam_x", type=float, help="fixed smoothing parameter along x")
    p_fit.add_argument("--lambda-z", dest="lam_z", type=float, help="fixed smoothing parameter along z")
    p_fit.add_argument("--auto", action="store_true",
                       help="select the smoothing parameter(s) by marginal likelihood (default)")
    p_fit.add_argument("--method", choices=("outer", "perf"), default="perf",
                       help="selection strategy when lambda is automatic (default perf)")
    p_fit.add_argument("--pmax", type=int, help="accelerate selection with a rank-p eigenbasis")
    p_fit.add_argument("--alpha", type=float, default=0.05, help="credible level (default 0.05)")
    p_fit.add_argument("--timings", action="store_true", help="record wall-clock in diagnostics")
    p_fit.add_argument("--out", default=".")

    p_ext = sub.add_parser("extrapolate", help="extend a completed fit beyond its grid")
    p_ext.add_argument("--state", required=True, help="fit_state.json written by the fit command")
    p_ext.add_argument("--extend-x", type=_parse_range, help="extended x range A..B")
    p_ext.add_argument("--extend-z", type=_parse_range, help="extended z range A..B (2D)")
    p_ext.add_argument("--mode", choices=("constrained", "unconstrained"), default="constrained")
    p_ext.add_argument("--alpha", type=float, default=0.05)
    p_ext.add_argument("--out", default=".")

    p_rep = sub.add_parser("replicate", help="run a named replication experiment")
    p_rep.add_argument("--experiment", required=True, choices=EXPERIMENT_IDS)
    p_rep.add_argument("--n", type=int, required=True, help="number of replicates")
    p_rep.add_argument("--seed", type=int, required=True)
    p_rep.add_argument("--workers", type=int, default=0,
                       help="parallel replicate workers (default: available cores, capped by WH_MAX_THREADS)")
    p_rep.add_argument("--timings", action="store_true", help="also write wall-clock CSV")
    p_rep.add_argument("--out", default=".")
    return parser


def cmd_aggregate(args) -> int:
    pf = read_records_csv(args.records)
    file_dim = pf.dim if len(pf) else (2 if args.z_min is not None else 1)
    if args.dim is not None and len(pf) and file_dim != args.dim:
        raise InvalidParameterError(f"--dim {args.dim} but {args.records} holds {file_dim}D records")
    want_z = (args.z_min is not None) or (args.z_max is not None)
    if want_z and (args.z_min is None or args.z_max is None):
        raise InvalidParameterError("2D aggregation needs both --z-min and --z-max")
    if len(pf) == 0:
        print(f"warning: {args.records} holds no records; writing a zero table", file=sys.stderr)
    if want_z:
        agg = aggregate_2d(pf, args.x_min, args.x_max, args.z_min, args.z_max)
    else:
        if len(pf) and pf.dim == 2:
            raise InvalidParameterError("records are 2D; provide --z-min/--z-max")
        agg = aggregate_1d(pf, args.x_min, args.x_max)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "aggregates.csv")
    write_aggregates_csv(out_path, agg)
    print(out_path)
    return EXIT_OK


def _fit_table_rows(agg: AggregatedExposure, theta, std_err, lower, upper):
    cells = agg.cells()
    for k in range(agg.n):
        coord = [str(int(c[k])) for c in cells]
        yield coord + [
            str(int(agg.d[k])), _fmt(agg.ec[k]), _fmt(theta[k]), _fmt(math.exp(theta[k])),
            _fmt(std_err[k]), _fmt(lower[k]), _fmt(upper[k]),
        ]


def cmd_fit(args) -> int:
    agg = read_aggregates_csv(args.aggregates)
    if args.dim is not None and agg.dim != args.dim:
        raise InvalidParameterError(f"--dim {args.dim} but {args.aggregates} is {agg.dim}D")
    if agg.dim == 1:
        orders = (args.q,)
        template = penalty_1d(agg.n, args.q, 1.0)
    else:
        orders = (args.qx or 2, args.qz or 2)
        template = penalty_2d(*agg.shape, *orders, 1.0, 1.0)

    fixed = _fixed_lambdas(args, agg.dim)
    if args.pmax is not None and args.method == "outer":
        raise InvalidParameterError("--pmax pairs with --method perf (reduction accelerates performance iteration)")
    if fixed is not None and args.pmax is not None:
        raise InvalidParameterError("--pmax only applies when lambda is selected automatically")

    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    try:
        if fixed is not None:
            fit = newton_fit(agg.d, agg.ec, template.with_lambdas(fixed))
            lambdas = fixed
            method = "fixed"
        elif args.pmax is not None:
            lambdas, fit = select_lambda_reduced(agg.d, agg.ec, template, p_max=args.pmax)
            method = "perf+reduced"
        elif args.method == "outer":
            lambdas, fit = select_lambda_outer(agg.d, agg.ec, template)
            method = "outer"
        else:
            lambdas, fit = select_lambda_performance(agg.d, agg.ec, template)
            method = "perf"
    except ConvergenceError as exc:
        _write_json(os.path.join(args.out, "diagnostics.json"), {
            "schema": 1, "error": str(exc), "trace": [float(v) for v in exc.trace],
        })
        raise
    wall = time.perf_counter() - t0

    std_err = np.sqrt(fit.psi_diag)
    lower, upper = credible_intervals(fit, args.alpha)
    fit_path = os.path.join(args.out, "fit.csv")
    header = (["x", "d", "ec"] if agg.dim == 1 else ["x", "z", "d", "ec"]) + [
        "log_hazard", "hazard", "std_err", "lower", "upper"]
    with open(fit_path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in _fit_table_rows(agg, fit.theta_hat, std_err, lower, upper):
            fh.write(",".join(row) + "\n")

    diagnostics = {
        "schema": 1,
        "dim": agg.dim,
        "orders": list(orders),
        "method": method,
        "lambda": list(lambdas),
        "edf": float(fit.edf),
        "penalized_loglik": float(fit.penalized_loglik),
        "laplace_marginal": None if fit.laplace_marginal is None else float(fit.laplace_marginal),
        "iterations": int(fit.iterations),
        "converged": bool(fit.converged),
        "alpha": args.alpha,
        "n_cells": int(agg.n),
        "wall_clock_s": wall if args.timings else None,
    }
    _write_json(os.path.join(args.out, "diagnostics.json"), diagnostics)

    state = {
        "schema": 1,
        "dim": agg.dim,
        "grid": {"x_min": agg.x_min, "x_max": agg.x_max, "z_min": agg.z_min, "z_max": agg.z_max},
        "orders": list(orders),
        "lambdas": list(lambdas),
        "theta_hat": [float(v) for v in fit.theta_hat],
        "weights": [float(v) for v in fit.smoothing_weights],
        "d": [int(v) for v in agg.d],
        "ec": [float(v) for v in agg.ec],
    }
    _write_json(os.path.join(args.out, "fit_state.json"), state)
    print(fit_path)
    return EXIT_OK


def _fixed_lambdas(args, dim):
    if dim == 1:
        if args.lam is not None:
            return (float(args.lam),)
        if args.lam_x is not None or args.lam_z is not None:
            raise InvalidParameterError("1D fits take --lambda, not --lambda-x/--lambda-z")
        return None
    if args.lam is not None:
        return (float(args.lam), float(args.lam))
    if (args.lam_x is None) != (args.lam_z is None):
        raise InvalidParameterError("2D fits need both --lambda-x and --lambda-z")
    if args.lam_x is not None:
        return (float(args.lam_x), float(args.lam_z))
    return None


def cmd_extrapolate(args) -> int:
    with open(args.state) as fh:
        state = json.load(fh)
    dim = state["dim"]
    grid = state["grid"]
    orders = tuple(state["orders"])
    lambdas = tuple(state["lambdas"])
    theta = np.asarray(state["theta_hat"], dtype=float)
    weights = np.asarray(state["weights"], dtype=float)
    d = np.asarray(state["d"], dtype=int)
    ec = np.asarray(state["ec"], dtype=float)

    x_rng = (grid["x_min"], grid["x_max"])
    x_plus = args.extend_x if args.extend_x is not None else x_rng
    if dim == 1:
        penalty = penalty_1d(x_rng[1] - x_rng[0] + 1, orders[0], lambdas[0])
        embedding = build_embedding((x_rng,), (x_plus,))
    else:
        z_rng = (grid["z_min"], grid["z_max"])
        z_plus = args.extend_z if args.extend_z is not None else z_rng
        nx, nz = x_rng[1] - x_rng[0] + 1, z_rng[1] - z_rng[0] + 1
        penalty = penalty_2d(nx, nz, *orders, *lambdas)
        embedding = build_embedding((x_rng, z_rng), (x_plus, z_plus))

    fit = SmoothingState(penalty=penalty, theta_hat=theta, weights=weights)
    if args.mode == "constrained":
        result = extrapolate_constrained(fit, embedding)
    else:
        result = extrapolate_unconstrained(fit, embedding)
    lower, upper = credible_intervals_extended(result, args.alpha)
    std_err = np.sqrt(result.psi_diag)

    d_plus = np.zeros(embedding.n_plus, dtype=int)
    ec_plus = np.zeros(embedding.n_plus)
    d_plus[embedding.orig_positions] = d
    ec_plus[embedding.orig_positions] = ec
    region = np.full(embedding.n_plus, "extrapolated", dtype=object)
    region[embedding.orig_positions] = "initial"

    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "extrapolated.csv")
    header = (["x", "d", "ec"] if dim == 1 else ["x", "z", "d", "ec"]) + [
        "log_hazard", "hazard", "std_err", "lower", "upper", "region"]
    xs_plus = np.arange(x_plus[0], x_plus[1] + 1)
    with open(out_path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(embedding.n_plus):
            if dim == 1:
                coord = [str(int(xs_plus[k]))]
            else:
                nxp = x_plus[1] - x_plus[0] + 1
                coord = [str(int(x_plus[0] + k % nxp)), str(int(z_plus[0] + k // nxp))]
            row = coord + [
                str(int(d_plus[k])), _fmt(ec_plus[k]), _fmt(result.y_plus[k]),
                _fmt(math.exp(result.y_plus[k])), _fmt(std_err[k]),
                _fmt(lower[k]), _fmt(upper[k]), str(region[k]),
            ]
            fh.write(",".join(row) + "\n")
    print(out_path)
    return EXIT_OK


def cmd_replicate(args) -> int:
    workers = args.workers if args.workers > 0 else (os.cpu_count() or 1)
    print(f"running {args.experiment}: {args.n} replicates, seed {args.seed}", file=sys.stderr)
    report = replicate_experiment(args.experiment, args.n, args.seed, workers=workers)
    paths = report.write(args.out, include_timings=args.timings)
    print(f"finished {args.experiment}: {len(report.rows)} metric rows", file=sys.stderr)
    for p in paths.values():
        print(p)
    return EXIT_OK


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


_COMMANDS = {
    "aggregate": cmd_aggregate,
    "fit": cmd_fit,
    "extrapolate": cmd_extrapolate,
    "replicate": cmd_replicate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (InvalidParameterError, DataInconsistencyError, FileNotFoundError,
            json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (SingularSystemError, NumericalError, SelectionError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
