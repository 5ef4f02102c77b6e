"""Synthetic multi-view scenes with known geometry, occlusions and noise."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import KERNELS, Grid, Kernel, TransformModel, TransformParams, WarpOperator
from .operators import LinearOperator, view_rng


def taper_window(side: int, width: int) -> np.ndarray:
    """Separable raised-cosine window equal to 1 away from a ``width``-pixel border."""
    w = np.ones(side)
    if width > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(width) + 0.5) / width)
        w[:width] = ramp
        w[-width:] = ramp[::-1]
    return np.outer(w, w)


def synthetic_reference(side: int, seed: int = 0, blobs: int = 12, rectangles: int = 4,
                        smoothing: float = 1.5, border: int | None = None) -> np.ndarray:
    """Piecewise-smooth test image in [0, 1] that fades to zero near the border.

    Gaussian blobs and axis-aligned rectangles are blurred slightly; the fade
    keeps the content inside the grid under moderate warps so the zero
    extension used by the interpolator does not clip it.
    """
    rng = view_rng(seed, 10_000)
    r, c = np.mgrid[0:side, 0:side].astype(float)
    img = np.zeros((side, side))
    for _ in range(blobs):
        cr, cc = rng.uniform(0.2, 0.8, 2) * side
        s = rng.uniform(0.04, 0.12) * side
        img += rng.uniform(0.3, 1.0) * np.exp(-((r - cr) ** 2 + (c - cc) ** 2) / (2 * s * s))
    for _ in range(rectangles):
        h, w = rng.integers(side // 8, side // 3, 2)
        r0 = rng.integers(side // 6, side - side // 6 - h + 1)
        c0 = rng.integers(side // 6, side - side // 6 - w + 1)
        img[r0:r0 + h, c0:c0 + w] += rng.uniform(0.2, 0.6)
    if smoothing > 0:
        img = gaussian_filter(img, smoothing, mode="constant")
    border = side // 6 if border is None else border
    img *= taper_window(side, border)
    img -= img.min()
    peak = img.max()
    return img / peak if peak > 0 else img


def draw_params(model: TransformModel, n_views: int, rng: np.random.Generator,
                translation_range: float = 0.0, scale_range: float = 0.0,
                linear_range: float = 0.0, projective_range: float = 0.0) -> np.ndarray:
    """Independent uniform draws centred on the identity.

    Translations lie in ``[-dt/2, dt/2]``, the scale in ``1 + [-ds/2, ds/2]``,
    off-identity linear entries in ``[-da/2, da/2]`` and projective terms in
    ``[-dh/2, dh/2]``.
    """
    p = model.n_params
    half = np.zeros(p)
    if model is TransformModel.TRANSLATION:
        half[:] = translation_range / 2
    elif model is TransformModel.SCALE_TRANSLATION:
        half[:] = [scale_range / 2, translation_range / 2, translation_range / 2]
    else:
        a, t = linear_range / 2, translation_range / 2
        half[:6] = [a, a, t, a, a, t]
        if model is TransformModel.HOMOGRAPHY_APPROX:
            half[6:] = projective_range / 2
    u = rng.uniform(-1.0, 1.0, size=(n_views, p))
    return model.identity[None, :] + u * half[None, :]


def rectangle_occlusions(grid: Grid, warped: np.ndarray, count: int, rng: np.random.Generator,
                         size_range=(4, 10)) -> np.ndarray:
    """Additive foreground that replaces rectangles of ``warped`` by random constants."""
    side = grid.side
    img = warped.reshape(side, side)
    fg = np.zeros((side, side))
    for _ in range(count):
        h, w = rng.integers(size_range[0], size_range[1] + 1, 2)
        r0 = rng.integers(0, side - h + 1)
        c0 = rng.integers(0, side - w + 1)
        val = rng.uniform(0.0, 1.0)
        fg[r0:r0 + h, c0:c0 + w] = val - img[r0:r0 + h, c0:c0 + w]
    return fg.ravel()


@dataclass
class SyntheticScene:
    grid: Grid
    model: TransformModel
    reference: np.ndarray  # background, length n
    thetas: np.ndarray  # (l, p) true parameters
    foregrounds: np.ndarray  # (l, n) additive occlusion images
    views: np.ndarray  # (l, n) true per-view images before sensing
    operators: tuple
    clean: np.ndarray  # (l, m) noiseless measurements
    noise: np.ndarray  # (l, m)
    sigma: float

    @property
    def y(self) -> np.ndarray:
        return self.clean + self.noise

    @property
    def n_views(self) -> int:
        return self.thetas.shape[0]


def make_scene(grid: Grid, model: TransformModel, thetas, operators: Sequence[LinearOperator],
               reference, foregrounds=None, sigma: float = 0.0, seed: int = 0,
               kernel: Kernel | str = "keys") -> SyntheticScene:
    """Assemble views ``T(theta_j) x0 + x_j`` and their noisy measurements."""
    if isinstance(kernel, str):
        kernel = KERNELS[kernel]
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    l = thetas.shape[0]
    ref = np.asarray(reference, dtype=float).ravel()
    fg = np.zeros((l, grid.n)) if foregrounds is None else np.asarray(foregrounds, dtype=float)
    warped = np.stack([WarpOperator(grid, TransformParams(model, t), kernel).apply(ref) for t in thetas])
    views = warped + fg
    clean = np.stack([A.apply(v) for A, v in zip(operators, views)])
    noise = np.zeros_like(clean)
    if sigma > 0:
        noise = sigma * view_rng(seed, 20_000).standard_normal(clean.shape)
    return SyntheticScene(grid, model, ref, thetas, fg, views, tuple(operators), clean, noise, sigma)
