"""Image priors, the Huber cost-to-move and their proximal operators.

Image stacks are ``(B, n)`` arrays; every prior is a weighted sum over the
``B`` blocks of a per-image convex function.
"""

from __future__ import annotations

import numpy as np

from .wavelets import WaveletFrame

# ---------------------------------------------------------------------------
# Huber function
# ---------------------------------------------------------------------------


def _check_mu(mu):
    if not mu > 0:
        raise ValueError(f"Huber smoothing mu must be positive, got {mu}")


def huber_elementwise(alpha, mu):
    _check_mu(mu)
    a = np.abs(np.asarray(alpha, dtype=float))
    return np.where(a < mu, a * a / (2.0 * mu), a - 0.5 * mu)


def huber_value(alpha, mu) -> float:
    """Continuous Huber function: a^2/(2 mu) below mu, |a| - mu/2 above."""
    return float(np.sum(huber_elementwise(alpha, mu)))


def huber_grad(alpha, mu):
    _check_mu(mu)
    a = np.asarray(alpha, dtype=float)
    return np.where(np.abs(a) < mu, a / mu, np.sign(a))


def huber_prox(z, lam, mu):
    """Elementwise ``argmin_p lam * h_mu(p) + (p - z)^2 / 2``."""
    _check_mu(mu)
    if lam < 0:
        raise ValueError("prox weight must be non-negative")
    z = np.asarray(z, dtype=float)
    if lam == 0:
        return z.copy()
    return np.where(np.abs(z) <= mu + lam, z / (1.0 + lam / mu), z - lam * np.sign(z))


def soft_threshold(z, lam):
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)


def prox_l1_huber(z, tw, tc, b, mu):
    """Elementwise ``argmin_a tw |a| + tc h_mu(a - b) + (a - z)^2 / 2``.

    The objective is a strictly convex 1-D function whose derivative is
    piecewise linear; its minimiser is either the kink at 0 or the stationary
    point of one smooth piece.  All seven candidates are evaluated and the best
    one kept, which stays exact even for tiny ``mu``.
    """
    _check_mu(mu)
    z, tw, tc, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (z, tw, tc, b)))
    shrink = 1.0 + tc / mu
    cands = [np.zeros_like(z)]
    for s in (1.0, -1.0):
        base = z - tw * s
        cands += [base - tc, base + tc, b + (base - b) / shrink]
    cands = np.stack(cands)

    def F(a):
        return tw * np.abs(a) + tc * huber_elementwise(a - b, mu) + 0.5 * (a - z) ** 2

    best = np.argmin(F(cands), axis=0)
    return np.take_along_axis(cands, best[None], axis=0)[0]


# ---------------------------------------------------------------------------
# l1 analysis prior
# ---------------------------------------------------------------------------


def prox_l1_analysis(frame: WaveletFrame, z, lam):
    """Prox of ``lam * ||W^T x||_1`` for an orthonormal frame."""
    if np.any(np.asarray(lam) < 0):
        raise ValueError("prox weight must be non-negative")
    c = frame.forward(z)
    return frame.inverse(soft_threshold(c, lam))


# ---------------------------------------------------------------------------
# Isotropic total variation with zero extension
# ---------------------------------------------------------------------------


def tv_gradient(x):
    """Forward differences along (horizontal, vertical); shape ``(..., 2, s, s)``.

    Samples beyond the last column/row are taken as zero.
    """
    x = np.asarray(x, dtype=float)
    d1 = -x.copy()
    d1[..., :, :-1] += x[..., :, 1:]
    d2 = -x.copy()
    d2[..., :-1, :] += x[..., 1:, :]
    return np.stack([d1, d2], axis=-3)


def tv_gradient_adjoint(q):
    q = np.asarray(q, dtype=float)
    p1 = q[..., 0, :, :]
    p2 = q[..., 1, :, :]
    out = -p1 - p2
    out[..., :, 1:] += p1[..., :, :-1]
    out[..., 1:, :] += p2[..., :-1, :]
    return out


TV_NORM_SQ = 8.0


def _as_square(x):
    x = np.asarray(x, dtype=float)
    if x.ndim >= 2 and x.shape[-1] == x.shape[-2]:
        return x
    side = int(round(np.sqrt(x.shape[-1])))
    if side * side != x.shape[-1]:
        raise ValueError("image length is not a perfect square")
    return x.reshape(x.shape[:-1] + (side, side))


def _pixel_norms(g):
    return np.sqrt(g[..., 0, :, :] ** 2 + g[..., 1, :, :] ** 2)


def tv_value(image) -> float:
    """Isotropic TV: sum over pixels of the Euclidean norm of forward differences."""
    return float(np.sum(_pixel_norms(tv_gradient(_as_square(image)))))


def _project_unit(q, radius=1.0):
    nrm = _pixel_norms(q)
    scale = np.maximum(nrm / radius, 1.0)
    return q / scale[..., None, :, :]


def tv_prox(z, lam, iters: int = 200, tol: float = 1e-8, q0=None, full_output: bool = False):
    """``argmin_p lam * TV(p) + ||p - z||^2 / 2`` by accelerated dual projection.

    Stops once the duality gap ``lam * (TV(p) - <grad p, q>)`` drops below
    ``tol * (1 + TV(p))`` or after ``iters`` iterations.  With
    ``full_output`` returns ``(p, gap, iterations, q)``.
    """
    if lam < 0:
        raise ValueError("prox weight must be non-negative")
    shape = np.shape(z)
    zz = _as_square(z)
    if lam == 0:
        p = zz.copy()
        return (p.reshape(shape), 0.0, 0, np.zeros(zz.shape[:-2] + (2,) + zz.shape[-2:])) if full_output else p.reshape(shape)
    q = np.zeros(zz.shape[:-2] + (2,) + zz.shape[-2:]) if q0 is None else np.array(q0, dtype=float)
    r = q.copy()
    t = 1.0
    step = 1.0 / (TV_NORM_SQ * lam)
    gap = np.inf
    it = 0
    for it in range(1, iters + 1):
        p_r = zz - lam * tv_gradient_adjoint(r)
        q_new = _project_unit(r + step * tv_gradient(p_r))
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        r = q_new + ((t - 1.0) / t_new) * (q_new - q)
        q, t = q_new, t_new
        if it % 10 == 0 or it == iters:
            p = zz - lam * tv_gradient_adjoint(q)
            g = tv_gradient(p)
            tvp = float(np.sum(_pixel_norms(g)))
            gap = lam * (tvp - float(np.sum(g * q)))
            if gap <= tol * (1.0 + tvp):
                break
    p = zz - lam * tv_gradient_adjoint(q)
    if full_output:
        return p.reshape(shape), gap, it, q
    return p.reshape(shape)


# ---------------------------------------------------------------------------
# Prior objects
# ---------------------------------------------------------------------------


def _block_weights(weights, B):
    w = np.broadcast_to(np.asarray(weights, dtype=float), (B,)).copy()
    if np.any(w < 0):
        raise ValueError("prior weights must be non-negative")
    return w


class NullPrior:
    """f = 0."""

    kind = "none"

    def value(self, x) -> float:
        return 0.0

    def prox(self, z, t):
        return np.array(z, dtype=float)


class L1AnalysisPrior:
    """``f(x) = sum_b w_b ||W^T x_b||_1`` for an orthonormal wavelet frame."""

    kind = "l1"

    def __init__(self, frame: WaveletFrame, weights=1.0):
        self.frame = frame
        self.weights = weights

    def _w(self, x):
        return _block_weights(self.weights, np.shape(x)[0])[:, None]

    def value(self, x) -> float:
        x = np.atleast_2d(x)
        return float(np.sum(self._w(x) * np.abs(self.frame.forward(x))))

    def prox(self, z, t):
        z = np.atleast_2d(z)
        return prox_l1_analysis(self.frame, z, t * self._w(z))

    # primal-dual interface: f(x) = sum_b w_b ||K x_b||_1 with K = W^T
    linear_norm_sq = 1.0

    def linear(self, x):
        return self.frame.forward(x)

    def linear_adjoint(self, q):
        return self.frame.inverse(q)

    def project_dual(self, q):
        w = self._w(q)
        return np.clip(q, -w, w)


class TVPrior:
    """``f(x) = sum_b w_b TV(x_b)`` (isotropic TV per image)."""

    kind = "tv"
    linear_norm_sq = TV_NORM_SQ

    def __init__(self, side: int, weights=1.0, iters: int = 200, tol: float = 1e-8):
        self.side = side
        self.weights = weights
        self.iters = iters
        self.tol = tol

    def _w(self, x):
        return _block_weights(self.weights, np.shape(x)[0])

    def _img(self, x):
        x = np.atleast_2d(x)
        return x.reshape(x.shape[0], self.side, self.side)

    def value(self, x) -> float:
        imgs = self._img(x)
        w = self._w(imgs)
        return float(sum(wb * tv_value(im) for wb, im in zip(w, imgs)))

    def prox(self, z, t):
        imgs = self._img(z)
        w = self._w(imgs)
        out = np.stack([tv_prox(im, t * wb, self.iters, self.tol) for wb, im in zip(w, imgs)])
        return out.reshape(np.atleast_2d(z).shape)

    def linear(self, x):
        return tv_gradient(self._img(x))

    def linear_adjoint(self, q):
        return tv_gradient_adjoint(q).reshape(q.shape[0], -1)

    def project_dual(self, q):
        w = self._w(q)
        nrm = _pixel_norms(q)
        radius = w[:, None, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(nrm > radius, radius / np.where(nrm > 0, nrm, 1.0), 1.0)
        return q * scale[:, None, :, :]


def make_prior(kind: str, side: int, frame: WaveletFrame | None = None, weights=1.0):
    kind = kind.lower()
    if kind in ("l1", "l1_analysis", "wavelet"):
        return L1AnalysisPrior(frame or WaveletFrame(side), weights)
    if kind == "tv":
        return TVPrior(side, weights)
    if kind in ("none", "zero"):
        return NullPrior()
    raise ValueError(f"unknown prior {kind!r}")
