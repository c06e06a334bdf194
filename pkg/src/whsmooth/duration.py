"""Aggregation of individual longitudinal records into experience tables.

Individual records carry an entry point, an observation duration and an
event indicator.  Aggregation produces per-cell event counts ``d`` and
central exposures ``e_c`` on an integer grid; in 2D both axes advance with
the same clock (an individual entering at (x0, z0) sits at (x0+u, z0+u)
after elapsed time u).  Events landing exactly on a cell's upper boundary
belong to the lower cell (half-open convention).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

__all__ = [
    "PortfolioRecord",
    "Portfolio",
    "AggregatedExposure",
    "aggregate_1d",
    "aggregate_2d",
    "crude_rates",
    "read_records_csv",
    "write_records_csv",
    "read_aggregates_csv",
    "write_aggregates_csv",
]


@dataclass(frozen=True)
class PortfolioRecord:
    """One individual's observation window.

    ``x_entry`` (and ``z_entry`` in 2D) locate the start of observation,
    ``t`` is the observed duration (> 0) and ``delta`` is 1 if the event of
    interest was observed at the end of the window, 0 if censored.
    """

    x_entry: float
    t: float
    delta: int
    z_entry: float | None = None


class Portfolio:
    """Column-oriented batch of portfolio records.

    Stores entry points, durations and event indicators as numpy arrays so
    aggregation and simulation stay vectorized; iterating yields
    ``PortfolioRecord`` objects.
    """

    def __init__(self, x, t, delta, z=None):
        self.x = np.asarray(x, dtype=float)
        self.t = np.asarray(t, dtype=float)
        self.delta = np.asarray(delta, dtype=int)
        self.z = None if z is None else np.asarray(z, dtype=float)
        n = self.x.size
        if self.t.size != n or self.delta.size != n or (self.z is not None and self.z.size != n):
            raise InvalidParameterError("record columns must have equal lengths")
        if n and (np.any(self.t <= 0) or not np.all(np.isin(self.delta, (0, 1)))):
            raise InvalidParameterError("records require t > 0 and delta in {0, 1}")

    @property
    def dim(self) -> int:
        return 1 if self.z is None else 2

    def __len__(self) -> int:
        return self.x.size

    def __iter__(self):
        for i in range(len(self)):
            yield PortfolioRecord(
                x_entry=float(self.x[i]),
                t=float(self.t[i]),
                delta=int(self.delta[i]),
                z_entry=None if self.z is None else float(self.z[i]),
            )

    @classmethod
    def coerce(cls, records) -> "Portfolio":
        """Accept a Portfolio or any iterable of PortfolioRecord."""
        if isinstance(records, cls):
            return records
        records = list(records)
        if not records:
            return cls(np.empty(0), np.empty(0), np.empty(0, dtype=int))
        has_z = records[0].z_entry is not None
        return cls(
            x=[r.x_entry for r in records],
            t=[r.t for r in records],
            delta=[r.delta for r in records],
            z=[r.z_entry for r in records] if has_z else None,
        )


@dataclass(frozen=True)
class AggregatedExposure:
    """Event counts and central exposures on an integer grid.

    Vectors follow the shared column-stacking order (x index fastest).  The
    grid covers cells ``x_min..x_max`` (each cell x spans [x, x+1)), and in
    2D additionally ``z_min..z_max``.
    """

    x_min: int
    x_max: int
    d: np.ndarray
    ec: np.ndarray
    z_min: int | None = None
    z_max: int | None = None

    @property
    def dim(self) -> int:
        return 1 if self.z_min is None else 2

    @property
    def shape(self) -> tuple[int, ...]:
        nx = self.x_max - self.x_min + 1
        if self.dim == 1:
            return (nx,)
        return (nx, self.z_max - self.z_min + 1)

    @property
    def n(self) -> int:
        return int(np.prod(self.shape))

    def cells(self):
        """Grid coordinates of every cell, in vector order."""
        xs = np.arange(self.x_min, self.x_max + 1)
        if self.dim == 1:
            return (xs,)
        zs = np.arange(self.z_min, self.z_max + 1)
        xx = np.tile(xs, zs.size)
        zz = np.repeat(zs, xs.size)
        return xx, zz


def _check_bounds(lo, hi, axis):
    if int(lo) != lo or int(hi) != hi:
        raise InvalidParameterError(f"{axis} bounds must be integers, got {lo}..{hi}")
    if lo > hi:
        raise InvalidParameterError(f"{axis} bounds must satisfy min <= max, got {lo}..{hi}")
    return int(lo), int(hi)


def aggregate_1d(records, x_min: int, x_max: int) -> AggregatedExposure:
    """Aggregate records onto the 1D grid ``x_min..x_max``.

    Per cell x, ``d`` counts events with ``x <= x_i + t_i < x + 1`` and
    ``e_c`` accumulates ``[min(t_i, x - x_i + 1) - max(0, x - x_i)]^+``,
    the time each individual spends in [x, x+1).  Records entirely outside
    the grid contribute nothing; an empty record list yields zero vectors.
    """
    x_min, x_max = _check_bounds(x_min, x_max, "x")
    pf = Portfolio.coerce(records)
    nx = x_max - x_min + 1
    d = np.zeros(nx, dtype=int)
    ec = np.zeros(nx, dtype=float)
    if len(pf) == 0:
        return AggregatedExposure(x_min, x_max, d, ec)
    end = pf.x + pf.t
    for k, x in enumerate(range(x_min, x_max + 1)):
        ec[k] = float(np.sum(np.clip(np.minimum(pf.t, x - pf.x + 1.0) - np.maximum(0.0, x - pf.x), 0.0, None)))
        d[k] = int(np.sum((pf.delta == 1) & (x <= end) & (end < x + 1)))
    return AggregatedExposure(x_min, x_max, d, ec)


def aggregate_2d(records, x_min: int, x_max: int, z_min: int, z_max: int) -> AggregatedExposure:
    """Aggregate records onto the 2D grid ``x_min..x_max`` by ``z_min..z_max``.

    Both axes advance with the same clock, so an individual's exposure to
    cell (x, z) is ``[min(t, x+1-x_i, z+1-z_i) - max(0, x-x_i, z-z_i)]^+``
    and the event falls in the cell containing (x_i + t_i, z_i + t_i).
    Output is vectorized in the shared column-stacking order.
    """
    x_min, x_max = _check_bounds(x_min, x_max, "x")
    z_min, z_max = _check_bounds(z_min, z_max, "z")
    pf = Portfolio.coerce(records)
    if pf.dim != 2 and len(pf) > 0:
        raise InvalidParameterError("2D aggregation requires records with a z entry")
    nx, nz = x_max - x_min + 1, z_max - z_min + 1
    d = np.zeros(nx * nz, dtype=int)
    ec = np.zeros(nx * nz, dtype=float)
    if len(pf) == 0:
        return AggregatedExposure(x_min, x_max, d, ec, z_min, z_max)
    end_x = pf.x + pf.t
    end_z = pf.z + pf.t
    for j, z in enumerate(range(z_min, z_max + 1)):
        lo_z = np.maximum(0.0, z - pf.z)
        hi_z = z + 1.0 - pf.z
        in_z = (z <= end_z) & (end_z < z + 1)
        for i, x in enumerate(range(x_min, x_max + 1)):
            k = i + j * nx
            span = np.minimum(np.minimum(pf.t, x + 1.0 - pf.x), hi_z) - np.maximum(np.maximum(0.0, x - pf.x), lo_z)
            ec[k] = float(np.sum(np.clip(span, 0.0, None)))
            d[k] = int(np.sum((pf.delta == 1) & (x <= end_x) & (end_x < x + 1) & in_z))
    return AggregatedExposure(x_min, x_max, d, ec, z_min, z_max)


def crude_rates(agg: AggregatedExposure) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell log crude rates ``ln(d / e_c)`` with a defined-cell mask.

    Cells with ``d == 0`` or ``e_c == 0`` have no finite log rate; they are
    reported with value 0.0 and ``defined=False`` so downstream weighted
    smoothing (weights d) ignores them.
    """
    defined = (agg.d > 0) & (agg.ec > 0)
    theta = np.zeros(agg.n, dtype=float)
    theta[defined] = np.log(agg.d[defined] / agg.ec[defined])
    return theta, defined


# ---------------------------------------------------------------------------
# CSV interfaces: records `x[,z],t,delta`, aggregates `x[,z],d,ec`
# ---------------------------------------------------------------------------

def read_records_csv(path) -> Portfolio:
    """Read individual records; header ``x,t,delta`` (1D) or ``x,z,t,delta`` (2D)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidParameterError(f"{path}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        if header == ["x", "t", "delta"]:
            has_z = False
        elif header == ["x", "z", "t", "delta"]:
            has_z = True
        else:
            raise InvalidParameterError(
                f"{path}: unrecognized header {header!r}, expected x[,z],t,delta"
            )
        cols = [[] for _ in header]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InvalidParameterError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise InvalidParameterError(f"{path}: line {lineno}: {exc}") from None
            for c, v in zip(cols, vals):
                c.append(v)
    if has_z:
        x, z, t, delta = cols
    else:
        (x, t, delta), z = cols, None
    if any(v not in (0.0, 1.0) for v in delta):
        raise InvalidParameterError(f"{path}: delta column must contain only 0 or 1")
    return Portfolio(x=x, t=t, delta=[int(v) for v in delta], z=z)


def write_records_csv(path, pf: Portfolio) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if pf.dim == 1:
            writer.writerow(["x", "t", "delta"])
            for i in range(len(pf)):
                writer.writerow([_fmt(pf.x[i]), _fmt(pf.t[i]), int(pf.delta[i])])
        else:
            writer.writerow(["x", "z", "t", "delta"])
            for i in range(len(pf)):
                writer.writerow([_fmt(pf.x[i]), _fmt(pf.z[i]), _fmt(pf.t[i]), int(pf.delta[i])])


def write_aggregates_csv(path, agg: AggregatedExposure) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if agg.dim == 1:
            writer.writerow(["x", "d", "ec"])
            (xs,) = agg.cells()
            for k in range(agg.n):
                writer.writerow([int(xs[k]), int(agg.d[k]), _fmt(agg.ec[k])])
        else:
            writer.writerow(["x", "z", "d", "ec"])
            xs, zs = agg.cells()
            for k in range(agg.n):
                writer.writerow([int(xs[k]), int(zs[k]), int(agg.d[k]), _fmt(agg.ec[k])])


def read_aggregates_csv(path) -> AggregatedExposure:
    """Read an aggregate table; requires full coverage of its integer grid."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InvalidParameterError(f"{path}: empty file, expected a header row") from None
        if header == ["x", "d", "ec"]:
            has_z = False
        elif header == ["x", "z", "d", "ec"]:
            has_z = True
        else:
            raise InvalidParameterError(f"{path}: unrecognized header {header!r}, expected x[,z],d,ec")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if has_z:
                    rows.append((int(row[0]), int(row[1]), int(row[2]), float(row[3])))
                else:
                    rows.append((int(row[0]), int(row[1]), float(row[2])))
            except (ValueError, IndexError) as exc:
                raise InvalidParameterError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise InvalidParameterError(f"{path}: no data rows")
    if not has_z:
        xs = [r[0] for r in rows]
        x_min, x_max = min(xs), max(xs)
        n = x_max - x_min + 1
        if sorted(xs) != list(range(x_min, x_max + 1)):
            raise InvalidParameterError(f"{path}: x column must cover {x_min}..{x_max} exactly once")
        d = np.zeros(n, dtype=int)
        ec = np.zeros(n, dtype=float)
        for x, dv, ev in rows:
            d[x - x_min] = dv
            ec[x - x_min] = ev
        return AggregatedExposure(x_min, x_max, d, ec)
    xs = [r[0] for r in rows]
    zs = [r[1] for r in rows]
    x_min, x_max, z_min, z_max = min(xs), max(xs), min(zs), max(zs)
    nx, nz = x_max - x_min + 1, z_max - z_min + 1
    if len(rows) != nx * nz or len({(x, z) for x, z, *_ in rows}) != nx * nz:
        raise InvalidParameterError(f"{path}: (x, z) cells must cover the full grid exactly once")
    d = np.zeros(nx * nz, dtype=int)
    ec = np.zeros(nx * nz, dtype=float)
    for x, z, dv, ev in rows:
        k = (x - x_min) + (z - z_min) * nx
        d[k] = dv
        ec[k] = ev
    return AggregatedExposure(x_min, x_max, d, ec, z_min, z_max)


def _fmt(v: float) -> str:
    """17 significant digits: re-reading reproduces the float bitwise."""
    return f"{float(v):.17g}"
