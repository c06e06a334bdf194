"""Derivative-free maximizers used for smoothing-parameter selection.

Both routines are deterministic: identical inputs produce identical probe
sequences.  They maximize (selection works on log-likelihoods), accept an
optional function-gain tolerance ``ftol`` so outer selection loops can stop
on likelihood stagnation, and return the best probe seen even when the
evaluation budget runs out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

__all__ = ["SearchConfig", "OptimizeResult", "brent_maximize", "nelder_mead_maximize"]

_GOLDEN = 0.5 * (3.0 - math.sqrt(5.0))  # golden-section fraction


@dataclass(frozen=True)
class SearchConfig:
    """Search settings for smoothing-parameter selection in log10 space.

    ``bracket`` drives the scalar search and doubles as a per-coordinate box
    for the two-parameter simplex search (the objective is treated as -inf
    outside it); ``start`` seeds the simplex; ``ftol`` (absolute gain in the
    objective) is optional and used by the generalized-selection loops.
    """

    bracket: tuple[float, float] = (-6.0, 12.0)
    start: tuple[float, float] = (2.0, 2.0)
    tol: float = 1e-3
    max_evals: int = 400
    ftol: float | None = None

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidParameterError(f"tol must be positive, got {self.tol}")
        if not self.bracket[0] < self.bracket[1]:
            raise InvalidParameterError(f"bracket must satisfy lower < upper, got {self.bracket}")
        if not all(self.bracket[0] <= s <= self.bracket[1] for s in self.start):
            raise InvalidParameterError(f"start {self.start} must lie inside bracket {self.bracket}")

    def boxed(self, objective):
        """Wrap a simplex objective so probes outside the box score -inf."""
        lo, hi = self.bracket

        def wrapped(u):
            u = np.asarray(u, dtype=float)
            if np.any(u < lo) or np.any(u > hi):
                return -math.inf
            return objective(u)

        return wrapped


@dataclass
class OptimizeResult:
    x: np.ndarray
    f: float
    evals: int
    converged: bool


def brent_maximize(f, bracket, tol: float = 1e-3, max_evals: int = 400,
                   ftol: float | None = None) -> OptimizeResult:
    """Maximize a scalar function on a bracket with Brent's method.

    Combines golden-section steps with parabolic interpolation; no
    derivatives needed.  For a unimodal objective the returned argmax is
    within ``tol`` of the true one; otherwise the best probe is returned.
    Non-finite objective values are treated as -inf.

    Parameters
    ----------
    f : callable
        Scalar function of one float.
    bracket : (float, float)
        Search interval, lower < upper.
    tol : float
        Absolute tolerance on the argmax.
    max_evals : int
        Evaluation budget; exceeding it returns the best probe with
        ``converged=False``.
    ftol : float, optional
        Stop once the best objective value improves by less than this over
        two consecutive iterations.
    """
    a, b = float(bracket[0]), float(bracket[1])
    if not a < b:
        raise InvalidParameterError(f"bracket must satisfy lower < upper, got {bracket}")

    evals = 0

    def g(u):
        nonlocal evals
        evals += 1
        val = f(u)
        return float(val) if np.isfinite(val) else -math.inf

    x = w = v = a + _GOLDEN * (b - a)
    fx = fw = fv = g(x)
    d = e = 0.0
    converged = False

    while evals < max_evals:
        m = 0.5 * (a + b)
        tol1 = tol * abs(x) + 1e-12
        tol2 = 2.0 * tol1
        if abs(x - m) <= tol2 - 0.5 * (b - a):
            converged = True
            break
        # objective-gain criterion: the three retained points bracket the
        # optimum, so once their values cluster within ftol nothing larger
        # than ftol is left to gain
        if (ftol is not None and x != w and w != v and x != v
                and np.isfinite(fv) and fx - fv <= ftol and fx - fw <= ftol):
            converged = True
            break
        use_golden = True
        if abs(e) > tol1 and np.isfinite(fx) and np.isfinite(fw) and np.isfinite(fv):
            # parabolic fit through (x, w, v); maximization flips the usual signs
            r = (x - w) * (fx - fv)
            qq = (x - v) * (fx - fw)
            p = (x - v) * qq - (x - w) * r
            qq = 2.0 * (qq - r)
            if qq > 0.0:
                p = -p
            qq = abs(qq)
            e_prev, e = e, d
            if abs(p) < abs(0.5 * qq * e_prev) and qq * (a - x) < p < qq * (b - x):
                d = p / qq
                u = x + d
                if (u - a) < tol2 or (b - u) < tol2:
                    d = tol1 if x < m else -tol1
                use_golden = False
        if use_golden:
            e = (b - x) if x < m else (a - x)
            d = _GOLDEN * e
        u = x + d if abs(d) >= tol1 else x + (tol1 if d > 0 else -tol1)
        fu = g(u)
        if fu >= fx:
            if u < x:
                b = x
            else:
                a = x
            v, w, x = w, x, u
            fv, fw, fx = fw, fx, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu >= fw or w == x:
                v, w = w, u
                fv, fw = fw, fu
            elif fu >= fv or v == x or v == w:
                v, fv = u, fu

    return OptimizeResult(x=np.array([x]), f=fx, evals=evals, converged=converged)


def nelder_mead_maximize(f, start, tol: float = 1e-3, max_evals: int = 400,
                         ftol: float | None = None, step: float = 1.0) -> OptimizeResult:
    """Maximize a function of a 2-vector with the Nelder-Mead simplex.

    Standard reflection/expansion/contraction/shrink coefficients
    (1, 2, 0.5, 0.5).  The initial simplex is the start point plus a unit
    step along each coordinate.  Terminates when the simplex diameter is at
    most ``tol`` (or, optionally, when the spread of the vertex objective
    values falls below ``ftol``); returns the best vertex seen.
    """
    start = np.asarray(start, dtype=float)
    dim = start.size
    evals = 0

    def g(u):
        nonlocal evals
        evals += 1
        val = f(u)
        return float(val) if np.isfinite(val) else -math.inf

    verts = [start.copy()]
    for k in range(dim):
        v = start.copy()
        v[k] += step
        verts.append(v)
    fvals = [g(v) for v in verts]
    converged = False

    while evals < max_evals:
        order = sorted(range(dim + 1), key=lambda i: -fvals[i])
        verts = [verts[i] for i in order]
        fvals = [fvals[i] for i in order]
        diam = max(
            float(np.max(np.abs(verts[i] - verts[j])))
            for i in range(dim + 1) for j in range(i + 1, dim + 1)
        )
        if diam <= tol:
            converged = True
            break
        if ftol is not None and math.isfinite(fvals[-1]) and fvals[0] - fvals[-1] <= ftol:
            converged = True
            break
        centroid = np.mean(verts[:-1], axis=0)
        worst = verts[-1]
        xr = centroid + 1.0 * (centroid - worst)
        fr = g(xr)
        if fr > fvals[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = g(xe)
            if fe > fr:
                verts[-1], fvals[-1] = xe, fe
            else:
                verts[-1], fvals[-1] = xr, fr
        elif fr > fvals[-2]:
            verts[-1], fvals[-1] = xr, fr
        else:
            xc = centroid + 0.5 * (worst - centroid)
            fc = g(xc)
            if fc > fvals[-1]:
                verts[-1], fvals[-1] = xc, fc
            else:
                for i in range(1, dim + 1):
                    verts[i] = verts[0] + 0.5 * (verts[i] - verts[0])
                    fvals[i] = g(verts[i])

    best = int(np.argmax(fvals))
    return OptimizeResult(
        x=verts[best].copy(), f=fvals[best], evals=evals, converged=converged
    )
