"""Reconstruction SNR, relative-transform registration error and noise bounds."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .geometry import KEYS, Grid, Kernel, TransformModel, TransformParams, WarpOperator

log = logging.getLogger(__name__)

SNR_CAP_DB = 300.0
Z99 = 2.326  # standard normal 99th percentile used by the Wilson-Hilferty rule


def chi2_quantile_wh(dof: float, z: float = Z99) -> float:
    """Wilson-Hilferty approximation of the chi-square quantile."""
    if dof < 1:
        raise ValueError("degrees of freedom must be at least 1")
    a = 2.0 / (9.0 * dof)
    return float(dof * (1.0 - a + z * np.sqrt(a)) ** 3)


def noise_bound(sigma: float, dof: int) -> float:
    """``epsilon`` with ``epsilon^2 = sigma^2 Q(dof, 0.99)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return 0.0
    return float(sigma * np.sqrt(chi2_quantile_wh(dof)))


@dataclass(frozen=True)
class NoiseModel:
    sigma: float
    epsilon: float

    @classmethod
    def from_sigma(cls, sigma: float, dof: int) -> "NoiseModel":
        return cls(sigma, noise_bound(sigma, dof))


def snr_db(estimate, reference) -> float:
    reference = np.asarray(reference, dtype=float)
    ref = float(np.linalg.norm(reference))
    if ref == 0:
        raise ValueError("reference image has zero norm")
    err = float(np.linalg.norm(np.asarray(estimate, dtype=float) - reference))
    if err == 0:
        return SNR_CAP_DB
    return float(min(-20.0 * np.log10(err / ref), SNR_CAP_DB))


def reconstruction_snr(x0, xj, theta_j, xj_true, grid: Grid, model: TransformModel,
                       kernel: Kernel = KEYS) -> float:
    """SNR in dB of the view estimate ``T(theta_j) x0 + x_j`` against the true view."""
    W = WarpOperator(grid, TransformParams(model, theta_j), kernel)
    return snr_db(W.apply(np.asarray(x0, dtype=float)) + xj, xj_true)


# ---------------------------------------------------------------------------
# Relative transforms
# ---------------------------------------------------------------------------


def to_matrix(model: TransformModel, theta) -> np.ndarray:
    """3x3 homogeneous matrix of a group-invertible model."""
    t = model.check(theta)
    if model is TransformModel.TRANSLATION:
        return np.array([[1.0, 0, t[0]], [0, 1.0, t[1]], [0, 0, 1.0]])
    if model is TransformModel.SCALE_TRANSLATION:
        return np.array([[t[0], 0, t[1]], [0, t[0], t[2]], [0, 0, 1.0]])
    if model is TransformModel.AFFINE:
        return np.array([[t[0], t[1], t[2]], [t[3], t[4], t[5]], [0, 0, 1.0]])
    raise ValueError(f"{model.value} has no exact matrix form")


def from_matrix(model: TransformModel, M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if model is TransformModel.TRANSLATION:
        return np.array([M[0, 2], M[1, 2]])
    if model is TransformModel.SCALE_TRANSLATION:
        return np.array([M[0, 0], M[0, 2], M[1, 2]])
    if model is TransformModel.AFFINE:
        return M[:2].ravel().copy()
    raise ValueError(f"{model.value} has no exact matrix form")


def _invert_points(model, theta, v1, v2, u_init, iters=50):
    """Solve ``tau_theta(u) = v`` pointwise by Newton's method."""
    u1, u2 = u_init
    t = model.check(theta)
    for _ in range(iters):
        f1, f2 = model.map(t, u1, u2)
        r1, r2 = f1 - v1, f2 - v2
        if max(np.max(np.abs(r1)), np.max(np.abs(r2))) < 1e-13:
            break
        # spatial Jacobian of the approximate homography
        w = 1.0 - t[6] * u1 - t[7] * u2
        a1 = t[0] * u1 + t[1] * u2 + t[2]
        a2 = t[3] * u1 + t[4] * u2 + t[5]
        j11 = t[0] * w - a1 * t[6]
        j12 = t[1] * w - a1 * t[7]
        j21 = t[3] * w - a2 * t[6]
        j22 = t[4] * w - a2 * t[7]
        det = j11 * j22 - j12 * j21
        if np.any(np.abs(det) < 1e-14):
            raise ValueError("transform is singular near the sample points")
        u1 = u1 - (j22 * r1 - j12 * r2) / det
        u2 = u2 - (-j21 * r1 + j11 * r2) / det
    return u1, u2


def relative_transform(model: TransformModel, theta_i, theta_j, side: int = 32) -> np.ndarray:
    """Parameters of ``tau_j^{-1} o tau_i`` (view-i coordinates to view-j coordinates).

    Exact for the group models.  The approximate homography family is not
    closed under composition, so its relative transform is the least-squares
    fit over the points of a ``side x side`` grid.
    """
    theta_i = model.check(theta_i)
    theta_j = model.check(theta_j)
    if model is not TransformModel.HOMOGRAPHY_APPROX:
        Mi, Mj = to_matrix(model, theta_i), to_matrix(model, theta_j)
        if abs(np.linalg.det(Mj)) < 1e-14:
            raise ValueError("singular transform")
        return from_matrix(model, np.linalg.solve(Mj, Mi))
    u1, u2 = Grid(side).coords()
    v1, v2 = model.map(theta_i, u1, u2)
    A = np.array([[theta_j[0], theta_j[1]], [theta_j[3], theta_j[4]]])
    if abs(np.linalg.det(A)) < 1e-14:
        raise ValueError("singular transform")
    init = np.linalg.solve(A, np.stack([v1 - theta_j[2], v2 - theta_j[5]]))
    w1, w2 = _invert_points(model, theta_j, v1, v2, (init[0], init[1]))

    def resid(t):
        m1, m2 = model.map(t, u1, u2)
        return np.concatenate([m1 - w1, m2 - w2])

    aff = relative_transform(TransformModel.AFFINE, theta_i[:6], theta_j[:6])
    x0 = np.concatenate([aff, [0.0, 0.0]])
    sol = least_squares(resid, x0, xtol=1e-15, ftol=1e-15, gtol=1e-15, method="lm")
    return sol.x


def registration_error(thetas_est, thetas_true, model: TransformModel, side: int = 32,
                       return_skipped: bool = False):
    """Mean over ordered pairs of ``||theta*_{i->j} - theta_{i->j}|| / ||theta_{i->j}||``.

    Pairs whose true relative parameters have zero norm are skipped.
    """
    est = np.atleast_2d(np.asarray(thetas_est, dtype=float))
    tru = np.atleast_2d(np.asarray(thetas_true, dtype=float))
    if est.shape != tru.shape:
        raise ValueError("estimated and true parameters differ in shape")
    if est.shape[0] < 2:
        raise ValueError("registration error needs at least two views")
    errs, skipped = [], []
    for i, j in itertools.permutations(range(est.shape[0]), 2):
        rt = relative_transform(model, tru[i], tru[j], side)
        nrm = float(np.linalg.norm(rt))
        if nrm == 0:
            skipped.append((i, j))
            continue
        re = relative_transform(model, est[i], est[j], side)
        errs.append(float(np.linalg.norm(re - rt)) / nrm)
    if skipped:
        log.info("registration_error skipped %d zero-norm pairs", len(skipped))
    sigma = float(np.mean(errs)) if errs else 0.0
    return (sigma, skipped) if return_skipped else sigma


def nonzero_fraction(coeffs, threshold: float = 1e-8) -> float:
    c = np.asarray(coeffs, dtype=float)
    return float(np.mean(np.abs(c) > threshold))
