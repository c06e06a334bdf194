"""Synthetic portfolio generation and replication experiments.

Hazard laws are piecewise constant on unit grid cells (the same assumption
the smoothing model makes), which permits exact piecewise-exponential event
sampling along each individual's trajectory: no discretization error, so a
constant-hazard portfolio reproduces the exponential law exactly.

All laws, entry distributions and censoring defaults in this module are
package defaults for desk-scale experiments, not calibrated values.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .duration import Portfolio, aggregate_1d, aggregate_2d, crude_rates
from .errors import InvalidParameterError, SmoothingError
from .gaussian import fit_gaussian
from .generalized import (
    delta_theta,
    laplace_marginal_loglik,
    marginal_loglik_at_infinity,
    newton_fit,
    select_lambda_outer,
    select_lambda_performance,
    theta_infinity,
)
from .penalty import penalty_1d, penalty_2d
from .rank_reduction import select_lambda_reduced

__all__ = [
    "HazardLaw",
    "SimConfig",
    "simulate",
    "child_seed",
    "ExperimentReport",
    "replicate_experiment",
    "EXPERIMENT_IDS",
]


@dataclass(frozen=True)
class HazardLaw:
    """Piecewise-constant hazard: ``mu(x + eps[, z + xi]) = exp(log_hazard(x[, z]))``.

    ``log_hazard`` must be vectorized over integer cell coordinates and
    finite on the support (hazard strictly positive and bounded).
    """

    dim: int
    log_hazard: object

    @staticmethod
    def gompertz(a: float = -9.0, b: float = 0.085) -> "HazardLaw":
        """Default 1D law: log-linear ``ln mu(x) = a + b x``."""
        return HazardLaw(dim=1, log_hazard=lambda x: a + b * np.asarray(x, dtype=float))

    @staticmethod
    def makeham(a: float = 3e-3, b: float = 1e-5, c: float = 0.105) -> "HazardLaw":
        """Curved 1D law ``mu(x) = a + b exp(c x)``.

        Unlike the log-linear default, the log hazard has genuine curvature
        at every order, so smoothing-parameter selection lands strictly
        inside its search bracket; the replication experiments use it for
        that reason.
        """
        def log_hazard(x):
            return np.log(a + b * np.exp(c * np.asarray(x, dtype=float)))

        return HazardLaw(dim=1, log_hazard=log_hazard)

    @staticmethod
    def constant(mu: float, dim: int = 1) -> "HazardLaw":
        if mu <= 0:
            raise InvalidParameterError("hazard must be strictly positive")
        if dim == 1:
            return HazardLaw(dim=1, log_hazard=lambda x: np.full_like(np.asarray(x, dtype=float), math.log(mu)))
        return HazardLaw(dim=2, log_hazard=lambda x, z: np.full_like(np.asarray(x, dtype=float), math.log(mu)))

    @staticmethod
    def additive_2d(c: float = -5.5, b_x: float = 0.04,
                    duration_profile: np.ndarray | None = None) -> "HazardLaw":
        """Default 2D law: ``ln mu(x, z) = c + b_x x + g(z)``.

        ``g`` is a decreasing tabulated profile over durations 0..14
        (values are held at the last entry beyond the table), reflecting
        termination intensities that fade with time already spent in the
        state.
        """
        if duration_profile is None:
            duration_profile = np.exp(-0.35 * np.arange(15.0)) - 0.2
        g = np.asarray(duration_profile, dtype=float)

        def log_hazard(x, z):
            zi = np.clip(np.asarray(z, dtype=int), 0, g.size - 1)
            return c + b_x * np.asarray(x, dtype=float) + g[zi]

        return HazardLaw(dim=2, log_hazard=log_hazard)

    @staticmethod
    def ltc_2d(a: float = 1.5e-2, b: float = 3e-6, c: float = 0.13,
               g_scale: float = 1.0, g_rate: float = 0.35, g_floor: float = -0.3) -> "HazardLaw":
        """Curved 2D law ``ln mu(x, z) = ln(a + b e^{c x}) + g_scale e^{-g_rate z} + g_floor``.

        Both axes carry curvature, so 2D selection stays interior; used by
        the replication experiments.
        """
        def log_hazard(x, z):
            x = np.asarray(x, dtype=float)
            z = np.asarray(z, dtype=float)
            return np.log(a + b * np.exp(c * x)) + g_scale * np.exp(-g_rate * z) + g_floor

        return HazardLaw(dim=2, log_hazard=log_hazard)

    @staticmethod
    def tabulated_1d(x_min: int, values: np.ndarray) -> "HazardLaw":
        """Log-hazard read from a table indexed by cell, clamped at the ends."""
        vals = np.asarray(values, dtype=float)

        def log_hazard(x):
            idx = np.clip(np.asarray(x, dtype=int) - x_min, 0, vals.size - 1)
            return vals[idx]

        return HazardLaw(dim=1, log_hazard=log_hazard)

    def rate(self, *cells) -> np.ndarray:
        return np.exp(self.log_hazard(*cells))


@dataclass(frozen=True)
class SimConfig:
    """Portfolio generation settings.

    Individuals enter uniformly on ``entry_x`` (and ``entry_z``), are
    censored after a Uniform(censoring) duration, and leave observation at
    the latest when their trajectory exits the grid window, so all observed
    time falls inside the window.
    """

    m: int
    seed: int
    x_window: tuple[int, int]
    entry_x: tuple[float, float]
    censoring: tuple[float, float] = (1.0, 8.0)
    z_window: tuple[int, int] | None = None
    entry_z: tuple[float, float] | None = None

    def __post_init__(self):
        if self.m < 1:
            raise InvalidParameterError("head count must be at least 1")
        lo, hi = self.x_window
        if not (lo <= self.entry_x[0] <= self.entry_x[1] < hi + 1):
            raise InvalidParameterError("entry ages must fall inside the grid window")
        if (self.z_window is None) != (self.entry_z is None):
            raise InvalidParameterError("2D simulation needs both z_window and entry_z")
        if self.z_window is not None:
            zlo, zhi = self.z_window
            if not (zlo <= self.entry_z[0] <= self.entry_z[1] < zhi + 1):
                raise InvalidParameterError("entry durations must fall inside the grid window")

    @property
    def dim(self) -> int:
        return 1 if self.z_window is None else 2


def child_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Deterministic per-replicate seed; independent of execution order."""
    return np.random.SeedSequence(entropy=(int(seed), int(index)))


def simulate(config: SimConfig, law: HazardLaw) -> Portfolio:
    """Draw a portfolio of individual observation records.

    Event times are sampled exactly by inverting the piecewise-exponential
    survival function along each trajectory: an exponential budget is spent
    cell by cell at the local hazard until it runs out (event) or censoring
    or window exit occurs first (delta = 0).  Fully deterministic given the
    config seed.
    """
    if law.dim != config.dim:
        raise InvalidParameterError(f"law dimension {law.dim} does not match config dimension {config.dim}")
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    m = config.m
    x0 = rng.uniform(config.entry_x[0], config.entry_x[1], m)
    z0 = rng.uniform(config.entry_z[0], config.entry_z[1], m) if config.dim == 2 else None
    censor = rng.uniform(config.censoring[0], config.censoring[1], m)
    budget = rng.exponential(1.0, m)

    horizon = config.x_window[1] + 1.0 - x0
    if config.dim == 2:
        horizon = np.minimum(horizon, config.z_window[1] + 1.0 - z0)
    cap = np.minimum(censor, horizon)

    u = np.zeros(m)
    t = cap.copy()
    delta = np.zeros(m, dtype=int)
    active = np.ones(m, dtype=bool)
    max_segments = 2 * int(np.ceil(cap.max())) + 4 if m else 0

    for _ in range(max_segments):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        xu = x0[idx] + u[idx]
        cell_x = np.floor(xu)
        seg = cell_x + 1.0 - xu
        if config.dim == 2:
            zu = z0[idx] + u[idx]
            cell_z = np.floor(zu)
            seg = np.minimum(seg, cell_z + 1.0 - zu)
            rate = law.rate(cell_x, cell_z)
        else:
            rate = law.rate(cell_x)
        seg = np.minimum(seg, cap[idx] - u[idx])
        hit = budget[idx] <= rate * seg
        ev = idx[hit]
        t[ev] = u[ev] + budget[ev] / rate[hit]
        delta[ev] = 1
        active[ev] = False
        keep = idx[~hit]
        budget[keep] -= rate[~hit] * seg[~hit]
        u[keep] += seg[~hit]
        done = keep[u[keep] >= cap[keep] - 1e-12]
        active[done] = False

    return Portfolio(x=x0, t=t, delta=delta, z=z0)


# ---------------------------------------------------------------------------
# Replication experiments
# ---------------------------------------------------------------------------

EXPERIMENT_IDS = ("normal-approx-bias", "outer-vs-performance", "rank-reduction-sweep")

#: desk-scale experiment settings (all package defaults)
EXPERIMENT_DEFAULTS = {
    "normal-approx-bias": {
        "sizes_1d": {"small": 1500, "medium": 7500, "large": 37500},
        "sizes_2d": {"small": 800, "medium": 4000, "large": 20000},
        "window_1d": dict(x_window=(50, 89), entry_x=(50.0, 85.0), censoring=(1.0, 6.0)),
        "window_2d": dict(x_window=(70, 89), entry_x=(70.0, 86.0),
                          z_window=(0, 7), entry_z=(0.0, 4.0), censoring=(0.5, 6.0)),
    },
    "outer-vs-performance": {
        "m": 25000,
        "window": dict(x_window=(40, 89), entry_x=(40.0, 85.0), censoring=(1.0, 8.0)),
    },
    "rank-reduction-sweep": {
        "m": 20000,
        "window": dict(x_window=(30, 103), entry_x=(30.0, 98.0), censoring=(1.0, 8.0)),
        "p_grid": (4, 6, 10, 20, 40, 74),
        "m_2d": 8000,
        "window_2d": dict(x_window=(65, 89), entry_x=(65.0, 86.0),
                          z_window=(0, 7), entry_z=(0.0, 4.0), censoring=(0.5, 6.0)),
        "p_max_2d": 60,
        "replicates_2d": 5,
    },
}

_Q_DEFAULT = 2


@dataclass
class ExperimentReport:
    """Per-replicate metrics plus summary medians and optional timings."""

    experiment: str
    seed: int
    n_replicates: int
    columns: list
    rows: list
    medians: dict
    timing_columns: list = field(default_factory=list)
    timing_rows: list = field(default_factory=list)
    timing_medians: dict | None = None

    def write(self, out_dir, include_timings: bool = False) -> dict:
        """Write metrics CSV and JSON summary (deterministic for a fixed seed).

        Wall-clock data goes to a separate timings CSV and is only written
        on request, so the default outputs are byte-identical across runs.
        """
        os.makedirs(out_dir, exist_ok=True)
        prefix = os.path.join(out_dir, self.experiment.replace("-", "_"))
        metrics_path = prefix + "_metrics.csv"
        summary_path = prefix + "_summary.json"
        with open(metrics_path, "w", newline="") as fh:
            fh.write(",".join(self.columns) + "\n")
            for row in self.rows:
                fh.write(",".join(_csv_cell(row.get(c)) for c in self.columns) + "\n")
        summary = {
            "schema": 1,
            "experiment": self.experiment,
            "seed": self.seed,
            "replicates": self.n_replicates,
            "medians": self.medians,
            "timings": self.timing_medians if include_timings else None,
        }
        with open(summary_path, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths = {"metrics": metrics_path, "summary": summary_path}
        if include_timings and self.timing_rows:
            timings_path = prefix + "_timings.csv"
            with open(timings_path, "w", newline="") as fh:
                fh.write(",".join(self.timing_columns) + "\n")
                for row in self.timing_rows:
                    fh.write(",".join(_csv_cell(row.get(c)) for c in self.timing_columns) + "\n")
            paths["timings"] = timings_path
        return paths


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _median(values) -> float | None:
    vals = [v for v in values if v is not None and np.isfinite(v)]
    return float(np.median(vals)) if vals else None


def replicate_experiment(experiment_id: str, n_replicates: int, seed: int,
                         workers: int = 1) -> ExperimentReport:
    """Run one of the named replication experiments.

    Replicates are independent; replicate r uses :func:`child_seed`
    ``(seed, r)`` so results do not depend on scheduling.  Failures inside
    a replicate are recorded in its row (``error`` column) without aborting
    the batch.
    """
    if experiment_id not in EXPERIMENT_IDS:
        raise InvalidParameterError(
            f"unknown experiment {experiment_id!r}; expected one of {EXPERIMENT_IDS}"
        )
    if n_replicates < 1:
        raise InvalidParameterError("n_replicates must be at least 1")
    max_workers = workers if workers else 1
    env_cap = os.environ.get("WH_MAX_THREADS")
    if env_cap:
        max_workers = min(max_workers, max(1, int(env_cap)))
    max_workers = min(max_workers, n_replicates)

    runner = _EXPERIMENT_RUNNERS[experiment_id]
    if max_workers > 1:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(runner, [(r, seed) for r in range(n_replicates)]))
    else:
        results = [runner((r, seed)) for r in range(n_replicates)]

    rows = [row for rep_rows, _ in results for row in rep_rows]
    timing_rows = [row for _, rep_times in results for row in rep_times]
    return _summarize(experiment_id, seed, n_replicates, rows, timing_rows)


def _summarize(experiment_id, seed, n_replicates, rows, timing_rows) -> ExperimentReport:
    if experiment_id == "normal-approx-bias":
        columns = ["dim", "size", "m", "replicate", "delta_norm", "error"]
        medians = {}
        for dim in (1, 2):
            for size in ("small", "medium", "large"):
                med = _median([r["delta_norm"] for r in rows if r["dim"] == dim and r["size"] == size])
                medians[f"delta_norm_{dim}d_{size}"] = med
        timing_columns = []
    elif experiment_id == "outer-vs-performance":
        columns = ["replicate", "lambda_outer", "lambda_perf", "delta_lambda_perf", "error"]
        medians = {
            "delta_lambda_perf": _median([r["delta_lambda_perf"] for r in rows]),
            "share_below_1pct": _share_below(rows, "delta_lambda_perf", 0.01),
        }
        timing_columns = ["replicate", "seconds_outer", "seconds_perf"]
    else:
        columns = ["dim", "replicate", "p", "lambda_hat", "delta_lambda", "error"]
        medians = {}
        for p in sorted({r["p"] for r in rows if r["dim"] == 1}):
            medians[f"delta_lambda_1d_p{p}"] = _median(
                [r["delta_lambda"] for r in rows if r["dim"] == 1 and r["p"] == p])
        medians["delta_lambda_2d_reduced"] = _median(
            [r["delta_lambda"] for r in rows if r["dim"] == 2])
        timing_columns = ["dim", "replicate", "p", "seconds", "seconds_full"]
    timing_medians = None
    if timing_rows:
        timing_medians = {}
        for col in timing_columns:
            if col.startswith("seconds"):
                timing_medians[col] = _median([r.get(col) for r in timing_rows])
    return ExperimentReport(
        experiment=experiment_id, seed=seed, n_replicates=n_replicates,
        columns=columns, rows=rows, medians=medians,
        timing_columns=timing_columns, timing_rows=timing_rows,
        timing_medians=timing_medians,
    )


def _share_below(rows, key, threshold) -> float | None:
    vals = [r[key] for r in rows if r.get(key) is not None and np.isfinite(r[key])]
    if not vals:
        return None
    return float(np.mean([v < threshold for v in vals]))


def _fit_bundle_1d(pf: Portfolio, window, q=_Q_DEFAULT):
    agg = aggregate_1d(pf, *window)
    template = penalty_1d(agg.n, q, 1.0)
    return agg, template


def _run_normal_approx(args):
    replicate, seed = args
    spec = EXPERIMENT_DEFAULTS["normal-approx-bias"]
    rows = []
    law1 = HazardLaw.makeham()
    law2 = HazardLaw.ltc_2d()
    for dim, sizes, window, law in (
        (1, spec["sizes_1d"], spec["window_1d"], law1),
        (2, spec["sizes_2d"], spec["window_2d"], law2),
    ):
        for size, m in sizes.items():
            row = {"dim": dim, "size": size, "m": m, "replicate": replicate,
                   "delta_norm": None, "error": None}
            try:
                ss = child_seed(seed, replicate * 1000 + m + dim)
                cfg = SimConfig(m=m, seed=_seed_int(ss), **window)
                pf = simulate(cfg, law)
                if dim == 1:
                    agg = aggregate_1d(pf, *window["x_window"])
                    template = penalty_1d(agg.n, _Q_DEFAULT, 1.0)
                else:
                    agg = aggregate_2d(pf, *window["x_window"], *window["z_window"])
                    template = penalty_2d(*agg.shape, _Q_DEFAULT, _Q_DEFAULT, 1.0, 1.0)
                lams, fit_ml = select_lambda_performance(agg.d, agg.ec, template)
                theta_crude, _ = crude_rates(agg)
                fit_norm = fit_gaussian(theta_crude, agg.d, fit_ml.penalty)
                theta_inf = theta_infinity(agg.d, agg.ec, fit_ml.penalty)
                row["delta_norm"] = delta_theta(fit_norm.theta_hat, fit_ml, theta_inf)
            except SmoothingError as exc:
                row["error"] = str(exc)
            rows.append(row)
    return rows, []


def _run_outer_vs_perf(args):
    replicate, seed = args
    spec = EXPERIMENT_DEFAULTS["outer-vs-performance"]
    row = {"replicate": replicate, "lambda_outer": None, "lambda_perf": None,
           "delta_lambda_perf": None, "error": None}
    timing = {"replicate": replicate, "seconds_outer": None, "seconds_perf": None}
    try:
        cfg = SimConfig(m=spec["m"], seed=_seed_int(child_seed(seed, replicate)), **spec["window"])
        pf = simulate(cfg, HazardLaw.makeham())
        agg, template = _fit_bundle_1d(pf, spec["window"]["x_window"])
        t0 = time.perf_counter()
        lam_outer, fit_outer = select_lambda_outer(agg.d, agg.ec, template)
        t1 = time.perf_counter()
        lam_perf, fit_perf = select_lambda_performance(agg.d, agg.ec, template)
        t2 = time.perf_counter()
        ml_outer = laplace_marginal_loglik(fit_outer)
        theta_inf = theta_infinity(agg.d, agg.ec, fit_outer.penalty)
        ml_inf = marginal_loglik_at_infinity(agg.d, agg.ec, fit_outer.penalty, theta_inf)
        ml_perf = laplace_marginal_loglik(fit_perf)
        row["lambda_outer"] = lam_outer[0]
        row["lambda_perf"] = lam_perf[0]
        denom = ml_outer - ml_inf
        row["delta_lambda_perf"] = (ml_outer - ml_perf) / denom if denom > 0 else math.nan
        timing["seconds_outer"] = t1 - t0
        timing["seconds_perf"] = t2 - t1
    except SmoothingError as exc:
        row["error"] = str(exc)
    return [row], [timing]


def _run_rank_reduction(args):
    replicate, seed = args
    spec = EXPERIMENT_DEFAULTS["rank-reduction-sweep"]
    rows, timings = [], []
    try:
        cfg = SimConfig(m=spec["m"], seed=_seed_int(child_seed(seed, replicate)), **spec["window"])
        pf = simulate(cfg, HazardLaw.makeham())
        agg, template = _fit_bundle_1d(pf, spec["window"]["x_window"])
        lam_outer, fit_outer = select_lambda_outer(agg.d, agg.ec, template)
        ml_outer = laplace_marginal_loglik(fit_outer)
        theta_inf = theta_infinity(agg.d, agg.ec, fit_outer.penalty)
        ml_inf = marginal_loglik_at_infinity(agg.d, agg.ec, fit_outer.penalty, theta_inf)
        denom = ml_outer - ml_inf
        for p in spec["p_grid"]:
            row = {"dim": 1, "replicate": replicate, "p": p,
                   "lambda_hat": None, "delta_lambda": None, "error": None}
            timing = {"dim": 1, "replicate": replicate, "p": p, "seconds": None, "seconds_full": None}
            try:
                t0 = time.perf_counter()
                lam_p, fit_p = select_lambda_reduced(agg.d, agg.ec, template, p_max=p)
                timing["seconds"] = time.perf_counter() - t0
                row["lambda_hat"] = lam_p[0]
                ml_p = laplace_marginal_loglik(fit_p)
                row["delta_lambda"] = (ml_outer - ml_p) / denom if denom > 0 else math.nan
            except SmoothingError as exc:
                row["error"] = str(exc)
            rows.append(row)
            timings.append(timing)
    except SmoothingError as exc:
        rows.append({"dim": 1, "replicate": replicate, "p": None,
                     "lambda_hat": None, "delta_lambda": None, "error": str(exc)})

    if replicate < spec["replicates_2d"]:
        row = {"dim": 2, "replicate": replicate, "p": spec["p_max_2d"],
               "lambda_hat": None, "delta_lambda": None, "error": None}
        timing = {"dim": 2, "replicate": replicate, "p": spec["p_max_2d"],
                  "seconds": None, "seconds_full": None}
        try:
            w2 = spec["window_2d"]
            cfg2 = SimConfig(m=spec["m_2d"], seed=_seed_int(child_seed(seed, 10_000 + replicate)), **w2)
            pf2 = simulate(cfg2, HazardLaw.ltc_2d())
            agg2 = aggregate_2d(pf2, *w2["x_window"], *w2["z_window"])
            template2 = penalty_2d(*agg2.shape, _Q_DEFAULT, _Q_DEFAULT, 1.0, 1.0)
            t0 = time.perf_counter()
            lam_full, fit_full = select_lambda_performance(agg2.d, agg2.ec, template2)
            t1 = time.perf_counter()
            lam_red, fit_red = select_lambda_reduced(agg2.d, agg2.ec, template2, p_max=spec["p_max_2d"])
            t2 = time.perf_counter()
            ml_full = laplace_marginal_loglik(fit_full)
            theta_inf2 = theta_infinity(agg2.d, agg2.ec, fit_full.penalty)
            ml_inf2 = marginal_loglik_at_infinity(agg2.d, agg2.ec, fit_full.penalty, theta_inf2)
            ml_red = laplace_marginal_loglik(fit_red)
            denom2 = ml_full - ml_inf2
            row["lambda_hat"] = math.sqrt(lam_red[0] * lam_red[1])
            row["delta_lambda"] = (ml_full - ml_red) / denom2 if denom2 > 0 else math.nan
            timing["seconds_full"] = t1 - t0
            timing["seconds"] = t2 - t1
        except SmoothingError as exc:
            row["error"] = str(exc)
        rows.append(row)
        timings.append(timing)
    return rows, timings


def _seed_int(ss: np.random.SeedSequence) -> int:
    """Collapse a seed sequence to one integer seed for SimConfig."""
    return int(ss.generate_state(1, dtype=np.uint64)[0])


_EXPERIMENT_RUNNERS = {
    "normal-approx-bias": _run_normal_approx,
    "outer-vs-performance": _run_outer_vs_perf,
    "rank-reduction-sweep": _run_rank_reduction,
}
