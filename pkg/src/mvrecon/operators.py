"""Matrix-free measurement operators and the stacked multi-view operator."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .geometry import KEYS, Grid, Kernel, TransformModel, TransformParams, WarpOperator


class LinearOperator:
    """Real linear map ``R^cols -> R^rows`` given by forward and adjoint callables.

    ``gram_scale`` is ``c`` when ``A A^T = c I`` is known to hold exactly
    (tight rows), else ``None``.
    """

    def __init__(
        self,
        rows: int,
        cols: int,
        forward: Callable[[np.ndarray], np.ndarray],
        adjoint: Callable[[np.ndarray], np.ndarray],
        gram_scale: float | None = None,
        name: str = "linop",
    ):
        self.rows = int(rows)
        self.cols = int(cols)
        self._forward = forward
        self._adjoint = adjoint
        self.gram_scale = gram_scale
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.cols,):
            raise ValueError(f"{self.name}: expected input of length {self.cols}, got {x.shape}")
        return self._forward(x)

    def adjoint(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.rows,):
            raise ValueError(f"{self.name}: expected input of length {self.rows}, got {v.shape}")
        return self._adjoint(v)

    __call__ = apply

    def dense(self) -> np.ndarray:
        return np.stack([self.apply(e) for e in np.eye(self.cols)], axis=1)

    def __repr__(self):
        return f"LinearOperator({self.name}, {self.rows}x{self.cols})"


def make_identity_op(n: int) -> LinearOperator:
    if n < 1:
        raise ValueError("n must be positive")
    return LinearOperator(n, n, lambda x: x.copy(), lambda v: v.copy(), gram_scale=1.0, name="identity")


def view_rng(seed: int, view: int = 0) -> np.random.Generator:
    """Counter-based generator keyed on ``(seed, view)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(view)])))


@lru_cache(maxsize=16)
def half_plane_rows(side: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Canonical real rows of the half-plane 2-D DFT.

    Returns ``(freq, imag, scale)`` of length ``side**2``: row r reads the real
    (``imag[r] == False``) or imaginary part of the unitary DFT coefficient at
    flat frequency index ``freq[r]``, multiplied by ``scale[r]``.  Frequencies
    are enumerated in increasing flat index.  Self-conjugate frequencies (DC and
    Nyquist combinations) contribute one real row with scale 1; every other
    frequency ``f`` with ``f < conj(f)`` contributes a real and an imaginary row
    with scale sqrt(2).  The resulting ``n x n`` real matrix is orthogonal.
    """
    k = np.arange(side)
    kr, kc = np.meshgrid(k, k, indexing="ij")
    flat = (kr * side + kc).ravel()
    conj = (((-kr) % side) * side + ((-kc) % side)).ravel()
    freq, imag, scale = [], [], []
    r2 = np.sqrt(2.0)
    for f, c in zip(flat, conj):
        if f == c:
            freq.append(f), imag.append(False), scale.append(1.0)
        elif f < c:
            freq += [f, f]
            imag += [False, True]
            scale += [r2, r2]
    out = (np.array(freq), np.array(imag), np.array(scale))
    for a in out:
        a.setflags(write=False)
    return out


def make_spread_spectrum_op(grid: Grid, m: int, seed: int, view: int = 0) -> LinearOperator:
    """Random +-1 modulation followed by ``m`` random half-plane Fourier rows.

    ``m`` counts real measurements.  The selected rows are drawn uniformly
    without replacement from the ``n`` canonical half-plane rows and kept in
    increasing order; the operator has orthonormal rows (``A A^T = I``).
    """
    n = grid.n
    if not 1 <= m <= n:
        raise ValueError(f"m must lie in [1, {n}], got {m}")
    side = grid.side
    rng = view_rng(seed, view)
    signs = rng.integers(0, 2, size=n) * 2.0 - 1.0
    omega = np.sort(rng.choice(n, size=m, replace=False))
    freq, imag, scale = half_plane_rows(side)
    sel_f, sel_i, sel_s = freq[omega], imag[omega], scale[omega]
    re_rows, im_rows = ~sel_i, sel_i

    def forward(x):
        Z = np.fft.fft2((signs * x).reshape(side, side), norm="ortho").ravel()
        z = Z[sel_f]
        return np.where(sel_i, z.imag, z.real) * sel_s

    def adjoint(v):
        w = np.zeros(n, dtype=complex)
        w.real[sel_f[re_rows]] = v[re_rows] * sel_s[re_rows]
        w.imag[sel_f[im_rows]] = v[im_rows] * sel_s[im_rows]
        x = np.fft.ifft2(w.reshape(side, side), norm="ortho").real.ravel()
        return signs * x

    op = LinearOperator(m, n, forward, adjoint, gram_scale=1.0, name="spread_spectrum")
    op.signs = signs
    op.omega = omega
    return op


def make_blur_downsample_op(grid: Grid, factor: int = 2) -> LinearOperator:
    """Non-overlapping ``factor x factor`` box average followed by decimation."""
    side = grid.side
    if factor < 1 or side % factor:
        raise ValueError(f"grid side {side} is not divisible by factor {factor}")
    lo = side // factor
    w = 1.0 / (factor * factor)

    def forward(x):
        return x.reshape(lo, factor, lo, factor).mean(axis=(1, 3)).ravel()

    def adjoint(v):
        up = np.repeat(np.repeat(v.reshape(lo, lo), factor, axis=0), factor, axis=1)
        return (w * up).ravel()

    op = LinearOperator(lo * lo, side * side, forward, adjoint, gram_scale=w, name="blur_downsample")
    op.factor = factor
    op.low_side = lo
    return op


@dataclass(frozen=True)
class MeasurementSet:
    """Per-view measurements ``y`` (shape ``(l, m)``) with their sensing operators."""

    y: np.ndarray
    operators: tuple[LinearOperator, ...]

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 2 or y.shape[0] < 1:
            raise ValueError("measurements must be an (l, m) array with l >= 1")
        if len(self.operators) != y.shape[0]:
            raise ValueError("one operator per view is required")
        for op in self.operators:
            if op.rows != y.shape[1]:
                raise ValueError("operator row count does not match measurement length")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "operators", tuple(self.operators))

    @property
    def n_views(self) -> int:
        return self.y.shape[0]

    @property
    def m(self) -> int:
        return self.y.shape[1]


class StackedOperator:
    """Joint operator: view j of ``apply(x)`` is ``A_j (T(theta_j) x_0 + x_j)``.

    Image stacks are ``(l + 1, n)`` arrays with the background in row 0.
    """

    def __init__(
        self,
        grid: Grid,
        views: Sequence[LinearOperator],
        model: TransformModel,
        thetas,
        kernel: Kernel = KEYS,
        warps: Sequence[WarpOperator] | None = None,
    ):
        self.grid = grid
        self.views = tuple(views)
        self.model = model
        self.kernel = kernel
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if thetas.shape != (len(self.views), model.n_params):
            raise ValueError(f"thetas must have shape {(len(self.views), model.n_params)}")
        rows = {op.rows for op in self.views}
        if len(rows) != 1:
            raise ValueError("all views must produce the same number of measurements")
        for op in self.views:
            if op.cols != grid.n:
                raise ValueError("view operator does not act on the image grid")
        self.thetas = thetas.copy()
        self.thetas.setflags(write=False)
        if warps is None:
            warps = [WarpOperator(grid, TransformParams(model, t), kernel) for t in thetas]
        self.warps = tuple(warps)
        self.m = rows.pop()

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def stack_shape(self) -> tuple[int, int]:
        return (self.n_views + 1, self.grid.n)

    def with_params(self, thetas) -> "StackedOperator":
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        warps = [
            w if np.array_equal(w.theta, t) else WarpOperator(self.grid, TransformParams(self.model, t), self.kernel)
            for w, t in zip(self.warps, thetas)
        ]
        return StackedOperator(self.grid, self.views, self.model, thetas, self.kernel, warps)

    def view_image(self, x, j: int):
        """``T(theta_j) x_0 + x_j`` for 0-based view index ``j``."""
        return self.warps[j].apply(x[0]) + x[j + 1]

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != self.stack_shape:
            raise ValueError(f"expected image stack of shape {self.stack_shape}, got {x.shape}")
        return np.stack([A.apply(self.view_image(x, j)) for j, A in enumerate(self.views)])

    def adjoint(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_views, self.m):
            raise ValueError(f"expected measurements of shape {(self.n_views, self.m)}, got {v.shape}")
        out = np.empty(self.stack_shape)
        out[0] = 0.0
        for j, A in enumerate(self.views):
            back = A.adjoint(v[j])
            out[j + 1] = back
            out[0] += self.warps[j].adjoint(back)
        return out

    def dense(self) -> np.ndarray:
        """Block matrix of shape ``(l m, (l + 1) n)`` assembled from dense blocks."""
        n, m, l = self.grid.n, self.m, self.n_views
        M = np.zeros((l * m, (l + 1) * n))
        for j, A in enumerate(self.views):
            Ad = A.dense()
            M[j * m:(j + 1) * m, :n] = Ad @ self.warps[j].dense()
            M[j * m:(j + 1) * m, (j + 1) * n:(j + 2) * n] = Ad
        return M


def stacked_apply(S: StackedOperator, x):
    return S.apply(x)


def stacked_adjoint(S: StackedOperator, v):
    return S.adjoint(v)


def estimate_norm(apply, adjoint, shape, iters: int = 30, seed: int = 0) -> float:
    """Power-iteration estimate of the spectral norm of a linear map."""
    x = np.random.default_rng(seed).standard_normal(shape)
    x /= np.linalg.norm(x)
    s = 0.0
    for _ in range(iters):
        z = adjoint(apply(x))
        s = np.linalg.norm(z)
        if s == 0.0:
            return 0.0
        x = z / s
    return float(np.sqrt(s))
