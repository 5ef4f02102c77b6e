"""Coordinate transforms, interpolation kernels and warp operators.

Images live on a square ``side x side`` lattice.  Pixel ``k`` (row-major,
``k = r * side + c``) sits at the coordinate ``u = (u1, u2)`` with
``u1 = c - side/2 + 1`` (horizontal) and ``u2 = r - side/2 + 1`` (vertical),
so both coordinates range over ``{-side/2 + 1, ..., side/2}``.

A warp resamples a background image ``x0`` at transformed coordinates::

    (T(theta) x0)[k] = sum_i x0[i] phi(tau(u_k)_1 - (u_i)_1) phi(tau(u_k)_2 - (u_i)_2)

with zero extension outside the grid.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded


@dataclass(frozen=True)
class Grid:
    """Square pixel lattice with centred integer coordinates."""

    side: int

    def __post_init__(self):
        if self.side < 8 or self.side % 2:
            raise ValueError(f"grid side must be even and >= 8, got {self.side}")

    @property
    def n(self) -> int:
        return self.side * self.side

    @property
    def offset(self) -> int:
        # index = coordinate + offset
        return self.side // 2 - 1

    @property
    def shape(self) -> tuple[int, int]:
        return (self.side, self.side)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(u1, u2)`` for every pixel in row-major order."""
        axis = np.arange(self.side) - self.offset
        u2, u1 = np.meshgrid(axis, axis, indexing="ij")
        return u1.ravel().astype(float), u2.ravel().astype(float)

    def index(self, u1, u2):
        """Pixel index of integer coordinates (no bounds check)."""
        return (np.asarray(u2) + self.offset) * self.side + (np.asarray(u1) + self.offset)


# ---------------------------------------------------------------------------
# Generating kernels
# ---------------------------------------------------------------------------


class Kernel:
    """Separable 1-D generating function with support (-2, 2)."""

    name = "kernel"
    prefilter = False

    def __call__(self, u):
        raise NotImplementedError

    def derivative(self, u):
        raise NotImplementedError


class KeysKernel(Kernel):
    """Keys cubic convolution kernel (a = -1/2).

    Interpolating (phi(k) = delta_k) and C^1; the second derivative jumps
    at |u| = 1 and |u| = 2.
    """

    name = "keys"

    def __call__(self, u):
        a = np.abs(np.asarray(u, dtype=float))
        a2 = a * a
        a3 = a2 * a
        inner = 1.5 * a3 - 2.5 * a2 + 1.0
        outer = -0.5 * a3 + 2.5 * a2 - 4.0 * a + 2.0
        return np.where(a < 1.0, inner, np.where(a < 2.0, outer, 0.0))

    def derivative(self, u):
        u = np.asarray(u, dtype=float)
        a = np.abs(u)
        inner = 4.5 * a * a - 5.0 * a
        outer = -1.5 * a * a + 5.0 * a - 4.0
        d = np.where(a < 1.0, inner, np.where(a < 2.0, outer, 0.0))
        return np.sign(u) * d


class CubicBSplineKernel(Kernel):
    """Cubic B-spline, used with an exact interpolating prefilter.

    The B-spline is C^2, so warp matrix entries are twice continuously
    differentiable in the parameters.  Because beta3 is not cardinal, the
    image samples are first converted to spline coefficients (zero extension,
    tridiagonal system per axis); the warp then evaluates the spline.
    """

    name = "bspline3"
    prefilter = True

    def __call__(self, u):
        a = np.abs(np.asarray(u, dtype=float))
        inner = 2.0 / 3.0 - a * a + 0.5 * a**3
        t = 2.0 - a
        outer = t**3 / 6.0
        return np.where(a < 1.0, inner, np.where(a < 2.0, outer, 0.0))

    def derivative(self, u):
        u = np.asarray(u, dtype=float)
        a = np.abs(u)
        inner = -2.0 * a + 1.5 * a * a
        outer = -0.5 * (2.0 - a) ** 2
        d = np.where(a < 1.0, inner, np.where(a < 2.0, outer, 0.0))
        return np.sign(u) * d


KEYS = KeysKernel()
BSPLINE3 = CubicBSplineKernel()
KERNELS = {KEYS.name: KEYS, BSPLINE3.name: BSPLINE3}


def keys_kernel(u):
    """Keys cubic interpolation kernel evaluated elementwise."""
    return KEYS(u)


def keys_kernel_derivative(u):
    return KEYS.derivative(u)


def _bspline_banded(side: int) -> np.ndarray:
    ab = np.empty((3, side))
    ab[0] = 1.0 / 6.0
    ab[1] = 4.0 / 6.0
    ab[2] = 1.0 / 6.0
    return ab


def bspline_prefilter(image: np.ndarray) -> np.ndarray:
    """Spline coefficients ``c`` with ``sum_i c_i beta3(k - i) = image[k]``."""
    side = image.shape[-1]
    ab = _bspline_banded(side)
    c = solve_banded((1, 1), ab, image, check_finite=False)
    c = solve_banded((1, 1), ab, c.T, check_finite=False).T
    return c


# ---------------------------------------------------------------------------
# Transform models
# ---------------------------------------------------------------------------


class TransformModel(enum.Enum):
    TRANSLATION = "translation"
    SCALE_TRANSLATION = "scale_translation"
    AFFINE = "affine"
    HOMOGRAPHY_APPROX = "homography_approx"

    @property
    def n_params(self) -> int:
        return {"translation": 2, "scale_translation": 3, "affine": 6, "homography_approx": 8}[
            self.value
        ]

    @property
    def identity(self) -> np.ndarray:
        return {
            "translation": np.array([0.0, 0.0]),
            "scale_translation": np.array([1.0, 0.0, 0.0]),
            "affine": np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            "homography_approx": np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
        }[self.value].copy()

    def check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(
                f"{self.value} expects {self.n_params} parameters, got shape {theta.shape}"
            )
        return theta

    def map(self, theta, u1, u2):
        """Apply ``tau_theta`` to coordinate arrays ``u1, u2``."""
        t = self.check(theta)
        u1 = np.asarray(u1, dtype=float)
        u2 = np.asarray(u2, dtype=float)
        if self is TransformModel.TRANSLATION:
            return u1 + t[0], u2 + t[1]
        if self is TransformModel.SCALE_TRANSLATION:
            return t[0] * u1 + t[1], t[0] * u2 + t[2]
        a1 = t[0] * u1 + t[1] * u2 + t[2]
        a2 = t[3] * u1 + t[4] * u2 + t[5]
        if self is TransformModel.AFFINE:
            return a1, a2
        w = 1.0 - t[6] * u1 - t[7] * u2
        return a1 * w, a2 * w

    def map_jacobian(self, theta, u1, u2):
        """Derivatives of the mapped coordinates, each of shape ``(len(u), p)``."""
        t = self.check(theta)
        u1 = np.asarray(u1, dtype=float)
        u2 = np.asarray(u2, dtype=float)
        one = np.ones_like(u1)
        zero = np.zeros_like(u1)
        if self is TransformModel.TRANSLATION:
            return np.stack([one, zero], axis=1), np.stack([zero, one], axis=1)
        if self is TransformModel.SCALE_TRANSLATION:
            return (np.stack([u1, one, zero], axis=1), np.stack([u2, zero, one], axis=1))
        if self is TransformModel.AFFINE:
            return (
                np.stack([u1, u2, one, zero, zero, zero], axis=1),
                np.stack([zero, zero, zero, u1, u2, one], axis=1),
            )
        a1 = t[0] * u1 + t[1] * u2 + t[2]
        a2 = t[3] * u1 + t[4] * u2 + t[5]
        w = 1.0 - t[6] * u1 - t[7] * u2
        d1 = np.stack([u1 * w, u2 * w, w, zero, zero, zero, -a1 * u1, -a1 * u2], axis=1)
        d2 = np.stack([zero, zero, zero, u1 * w, u2 * w, w, -a2 * u1, -a2 * u2], axis=1)
        return d1, d2


def map_point(model: TransformModel, theta, u):
    """Map a single coordinate pair (or an array of shape ``(..., 2)``)."""
    u = np.asarray(u, dtype=float)
    v1, v2 = model.map(theta, u[..., 0], u[..., 1])
    return np.stack([v1, v2], axis=-1)


@dataclass(frozen=True)
class TransformParams:
    model: TransformModel
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", self.model.check(self.theta).copy())

    @classmethod
    def identity(cls, model: TransformModel) -> "TransformParams":
        return cls(model, model.identity)


@dataclass(frozen=True)
class ParamBounds:
    """Box constraint ``lower <= theta <= upper``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).copy()
        hi = np.asarray(self.upper, dtype=float).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("bounds must be 1-D vectors of equal length")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def contains(self, theta, tol: float = 0.0) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower - tol) and np.all(theta <= self.upper + tol))

    def project(self, theta) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)

    @classmethod
    def around_identity(cls, model: TransformModel, half_widths) -> "ParamBounds":
        c = model.identity
        h = np.broadcast_to(np.asarray(half_widths, dtype=float), c.shape)
        return cls(c - h, c + h)

    @classmethod
    def fixed(cls, model: TransformModel, theta=None) -> "ParamBounds":
        t = model.identity if theta is None else model.check(theta)
        return cls(t, t)


def default_bounds(model: TransformModel, translation: float = 20.0) -> ParamBounds:
    """Bounds used in the reference experiments; ``translation`` is in pixels."""
    if model is TransformModel.TRANSLATION:
        half = [translation, translation]
    elif model is TransformModel.SCALE_TRANSLATION:
        half = [0.5, translation, translation]
    elif model is TransformModel.AFFINE:
        half = [0.2, 0.2, translation, 0.2, 0.2, translation]
    else:
        half = [0.2, 0.2, translation, 0.2, 0.2, translation, 0.01, 0.01]
    return ParamBounds.around_identity(model, half)


# ---------------------------------------------------------------------------
# Warp operator
# ---------------------------------------------------------------------------


def _taps(pos: np.ndarray, side: int, kernel: Kernel):
    """Tap indices, validity mask, weights and weight derivatives along one axis."""
    base = np.floor(pos).astype(np.int64) - 1
    idx = base[:, None] + np.arange(4)[None, :]
    dist = pos[:, None] - idx
    w = kernel(dist)
    dw = kernel.derivative(dist)
    valid = (idx >= 0) & (idx < side)
    return idx, valid, w, dw


@dataclass(frozen=True, eq=False)
class WarpOperator:
    """Sparse interpolation matrix ``T(theta)`` acting on flattened images.

    Immutable once built; ``apply``/``adjoint``/``jacobian`` are re-entrant.
    """

    grid: Grid
    params: TransformParams
    kernel: Kernel = KEYS
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        g = self.grid
        u1, u2 = g.coords()
        v1, v2 = self.params.model.map(self.params.theta, u1, u2)
        ix, vx, wx, dwx = _taps(v1 + g.offset, g.side, self.kernel)
        iy, vy, wy, dwy = _taps(v2 + g.offset, g.side, self.kernel)
        self._cache.update(
            u1=u1, u2=u2, ix=ix, iy=iy, vx=vx, vy=vy, wx=wx, wy=wy, dwx=dwx, dwy=dwy
        )
        # 4x4 stencil per output pixel
        valid = vy[:, :, None] & vx[:, None, :]
        data = wy[:, :, None] * wx[:, None, :]
        cols = iy[:, :, None] * g.side + ix[:, None, :]
        rows = np.broadcast_to(np.arange(g.n)[:, None, None], cols.shape)
        mat = sp.csr_matrix(
            (data[valid], (rows[valid], cols[valid])), shape=(g.n, g.n)
        )
        self._cache["matrix"] = mat
        self._cache["matrix_t"] = mat.T.tocsr()

    @property
    def model(self) -> TransformModel:
        return self.params.model

    @property
    def theta(self) -> np.ndarray:
        return self.params.theta

    @property
    def shape(self) -> tuple[int, int]:
        return (self.grid.n, self.grid.n)

    @property
    def stencil_matrix(self) -> sp.csr_matrix:
        """Kernel-evaluation matrix (equals ``T(theta)`` for cardinal kernels)."""
        return self._cache["matrix"]

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.grid.n,):
            raise ValueError(f"expected vector of length {self.grid.n}, got shape {x.shape}")
        return x

    def _to_coeffs(self, x):
        if not self.kernel.prefilter:
            return x
        side = self.grid.side
        return bspline_prefilter(x.reshape(side, side)).ravel()

    def apply(self, x):
        x = self._to_coeffs(self._check(x))
        return self._cache["matrix"] @ x

    def adjoint(self, v):
        v = self._check(v)
        out = self._cache["matrix_t"] @ v
        # the prefilter is symmetric, so its adjoint is itself
        return self._to_coeffs(out)

    def dense(self) -> np.ndarray:
        """Explicit ``n x n`` matrix (small grids only)."""
        eye = np.eye(self.grid.n)
        return np.stack([self.apply(e) for e in eye], axis=1)

    def jacobian(self, x):
        """Dense ``n x p`` matrix whose column i is ``d/dtheta_i T(theta) x``."""
        c = self._cache
        side = self.grid.side
        coeffs = self._to_coeffs(self._check(x)).reshape(side, side)
        valid = c["vy"][:, :, None] & c["vx"][:, None, :]
        iy = np.clip(c["iy"], 0, side - 1)
        ix = np.clip(c["ix"], 0, side - 1)
        samples = np.where(valid, coeffs[iy[:, :, None], ix[:, None, :]], 0.0)
        g1 = np.einsum("kb,ka,kba->k", c["wy"], c["dwx"], samples)
        g2 = np.einsum("kb,ka,kba->k", c["dwy"], c["wx"], samples)
        d1, d2 = self.model.map_jacobian(self.theta, c["u1"], c["u2"])
        return g1[:, None] * d1 + g2[:, None] * d2


def make_warp(grid: Grid, model: TransformModel, theta, kernel: Kernel = KEYS) -> WarpOperator:
    return WarpOperator(grid, TransformParams(model, theta), kernel)


def warp_apply(W: WarpOperator, x0):
    return W.apply(x0)


def warp_adjoint(W: WarpOperator, v):
    return W.adjoint(v)


def warp_jacobian(W: WarpOperator, x0):
    return W.jacobian(x0)


def dense_warp_oracle(grid: Grid, model: TransformModel, theta, kernel: Kernel = KEYS) -> np.ndarray:
    """Assemble ``T(theta)`` entry by entry from its defining formula.

    Quadratic in ``n``; for verification on small grids only.
    """
    u1, u2 = grid.coords()
    v1, v2 = model.map(theta, u1, u2)
    T = kernel(v1[:, None] - u1[None, :]) * kernel(v2[:, None] - u2[None, :])
    if kernel.prefilter:
        side = grid.side
        ab = _bspline_banded(side)
        B1 = np.diag(ab[1]) + np.diag(ab[0, 1:], 1) + np.diag(ab[2, :-1], -1)
        T = T @ np.linalg.inv(np.kron(B1, B1))
    return T
