"""Convex per-view baselines: l1 analysis BPDN and its group-sparse variant.

Both solve ``min R(W^T X)  s.t.  ||Y - A X||_F <= eps`` for a stack ``X`` of
per-view images, with ``R`` either the sum of l1 norms or the l2,1 norm that
couples the same wavelet coefficient across views.  Douglas-Rachford splitting
is used; the data constraint has a closed-form projection because every
sensing operator has orthogonal rows of equal norm (``A_j A_j^T = c I``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .operators import LinearOperator
from .priors import soft_threshold
from .wavelets import WaveletFrame

log = logging.getLogger(__name__)


@dataclass
class BaselineResult:
    images: np.ndarray  # (l, n)
    objective: float
    residual: float
    iterations: int


def _tight_scale(ops: Sequence[LinearOperator]) -> float:
    scales = {op.gram_scale for op in ops}
    if None in scales or len(scales) != 1:
        raise ValueError("baselines need sensing operators with a common known A A^T = c I")
    return float(scales.pop())


def _apply(ops, X):
    return np.stack([A.apply(x) for A, x in zip(ops, X)])


def _adjoint(ops, R):
    return np.stack([A.adjoint(r) for A, r in zip(ops, R)])


def project_data_ball(ops, Y, X, eps: float, c: float):
    """Euclidean projection of ``X`` onto ``{X : ||A X - Y||_F <= eps}``."""
    R = _apply(ops, X) - Y
    nrm = float(np.linalg.norm(R))
    if nrm <= eps:
        return X
    return X - _adjoint(ops, R) * ((1.0 - eps / nrm) / c)


def group_shrink(C, t):
    """Row-group soft threshold across views: ``C`` has shape ``(l, n)``."""
    nrm = np.sqrt(np.sum(C * C, axis=0, keepdims=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(nrm > t, 1.0 - t / np.where(nrm > 0, nrm, 1.0), 0.0)
    return C * scale


def l21_norm(C) -> float:
    return float(np.sum(np.sqrt(np.sum(np.asarray(C) ** 2, axis=0))))


def _douglas_rachford(frame, ops, Y, eps, shrink, value, step, max_iter, tol):
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if eps < 0:
        raise ValueError("epsilon must be non-negative")
    ops = tuple(ops)
    if len(ops) != Y.shape[0]:
        raise ValueError("one operator per view is required")
    c = _tight_scale(ops)
    # least-norm feasible start
    Z = _adjoint(ops, Y) / c
    best = None
    it = 0
    prev = np.inf
    for it in range(1, max_iter + 1):
        X = frame.inverse(shrink(frame.forward(Z), step))
        P = project_data_ball(ops, Y, 2.0 * X - Z, eps, c)
        Z = Z + P - X
        if it % 10 == 0 or it == max_iter:
            Xf = project_data_ball(ops, Y, X, eps, c)
            F = value(frame.forward(Xf))
            if best is None or F < best[1]:
                best = (Xf, F)
            if abs(prev - F) <= tol * max(abs(F), 1e-300) and float(np.linalg.norm(P - X)) <= tol * max(1.0, float(np.linalg.norm(X))):
                break
            prev = F
    Xf, F = best
    res = float(np.linalg.norm(_apply(ops, Xf) - Y))
    return BaselineResult(Xf, F, res, it)


def solve_bpdn(frame: WaveletFrame, ops: Sequence[LinearOperator], Y, eps: float,
               step: float = 0.05, max_iter: int = 20000, tol: float = 1e-9) -> BaselineResult:
    """``min sum_j ||W^T x_j||_1  s.t.  ||Y - A X||_F <= eps``."""
    return _douglas_rachford(
        frame, ops, Y, eps, soft_threshold, lambda C: float(np.sum(np.abs(C))), step, max_iter, tol
    )


def solve_group_sparse(frame: WaveletFrame, ops: Sequence[LinearOperator], Y, eps: float,
                       step: float = 0.05, max_iter: int = 20000, tol: float = 1e-9) -> BaselineResult:
    """``min ||W^T X||_{2,1}  s.t.  ||Y - A X||_F <= eps`` (groups across views)."""
    return _douglas_rachford(frame, ops, Y, eps, group_shrink, l21_norm, step, max_iter, tol)
