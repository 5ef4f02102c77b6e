"""Small dense box-constrained convex quadratic programs."""

from __future__ import annotations

import numpy as np


def pg_residual(M, g, lo, hi, d) -> float:
    """Norm of the projected-gradient fixed-point residual with step 1/||M||."""
    lam = max(np.linalg.norm(M, 2), 1e-300)
    return float(np.linalg.norm(d - np.clip(d - (M @ d + g) / lam, lo, hi)))


def _projected_gradient(M, g, lo, hi, d, tol, max_iter):
    lam = max(np.linalg.norm(M, 2), 1e-300)
    y, t = d.copy(), 1.0
    for _ in range(max_iter):
        d_new = np.clip(y - (M @ y + g) / lam, lo, hi)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = d_new + ((t - 1) / t_new) * (d_new - d)
        d, t = d_new, t_new
        if pg_residual(M, g, lo, hi, d) <= tol:
            break
    return d


def solve_box_qp(M, g, lo, hi, tol: float = 1e-12, max_iter: int | None = None):
    """Minimise ``<g, d> + d^T M d / 2`` subject to ``lo <= d <= hi``.

    ``M`` must be symmetric positive definite and ``lo <= 0 <= hi``.  A primal
    active-set method started at ``d = 0`` solves the problem exactly in a
    finite number of steps; the projected-gradient fixed-point residual is then
    checked against ``tol * max(1, ||d||)`` and polished with accelerated
    projected gradient if needed.
    """
    M = np.asarray(M, dtype=float)
    g = np.asarray(g, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    p = g.size
    if np.any(lo > 0) or np.any(hi < 0):
        raise ValueError("the origin must be feasible")
    fixed = lo == hi
    d = np.zeros(p)
    d[fixed] = lo[fixed]
    at_lo = fixed.copy()
    at_hi = np.zeros(p, dtype=bool)
    max_iter = max_iter or 20 * (p + 1)
    for _ in range(max_iter):
        active = at_lo | at_hi
        free = ~active
        cand = d.copy()
        if free.any():
            rhs = -(g[free] + M[np.ix_(free, active)] @ d[active])
            cand[free] = np.linalg.solve(M[np.ix_(free, free)], rhs)
        if np.all(cand >= lo) and np.all(cand <= hi):
            d = cand
            grad = M @ d + g
            viol = np.where(at_lo & ~fixed, -grad, 0.0) + np.where(at_hi, grad, 0.0)
            idx = int(np.argmax(viol))
            if viol[idx] <= 0.0:
                break
            at_lo[idx] = at_hi[idx] = False
        else:
            step = cand - d
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(step > 0, (hi - d) / step, np.where(step < 0, (lo - d) / step, np.inf))
            ratio[active] = np.inf
            idx = int(np.argmin(ratio))
            alpha = min(max(ratio[idx], 0.0), 1.0)
            d = d + alpha * step
            if step[idx] > 0:
                d[idx] = hi[idx]
                at_hi[idx] = True
            else:
                d[idx] = lo[idx]
                at_lo[idx] = True
    d = np.clip(d, lo, hi)
    if pg_residual(M, g, lo, hi, d) > tol * max(1.0, np.linalg.norm(d)):
        d = _projected_gradient(M, g, lo, hi, d, tol * max(1.0, np.linalg.norm(d)), 20000)
    return d
