"""Orthonormal periodic 2-D wavelet transforms."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

# Daubechies orthonormal low-pass filters (sum = sqrt(2)).
FILTERS = {
    "haar": np.array([1.0, 1.0]) / np.sqrt(2.0),
    # 8 taps, 4 vanishing moments
    "db4": np.array(
        [
            0.2303778133088965008632911830440708500016152482483092977910968,
            0.7148465705529156470899219552739926037076084010993081758450110,
            0.6308807679298589078817163383006152202032229226771951174057473,
            -0.02798376941685985421141374718007538541198732022449175284003358,
            -0.1870348117190930840795706727890814195845441743745800912057770,
            0.03084138183556076362721936253495905017031482172003403341821219,
            0.03288301166688519973540751354924438866454194113754971259727278,
            -0.01059740178506903210488320852402722918109996490637641983484974,
        ]
    ),
}
ALIASES = {"daubechies8": "db4", "daub8": "db4", "d8": "db4"}


def lowpass(name: str) -> np.ndarray:
    key = ALIASES.get(name.lower(), name.lower())
    if key not in FILTERS:
        raise ValueError(f"unknown wavelet {name!r}; choose from {sorted(FILTERS) + sorted(ALIASES)}")
    return FILTERS[key]


def highpass(h: np.ndarray) -> np.ndarray:
    L = len(h)
    return np.array([(-1) ** m * h[L - 1 - m] for m in range(L)])


@lru_cache(maxsize=64)
def analysis_matrix(name: str, N: int) -> np.ndarray:
    """One-level periodic analysis matrix: low-pass rows on top, high-pass below."""
    if N % 2:
        raise ValueError("signal length must be even")
    h = lowpass(name)
    g = highpass(h)
    M = np.zeros((N, N))
    for k in range(N // 2):
        for m in range(len(h)):
            M[k, (2 * k + m) % N] += h[m]
            M[N // 2 + k, (2 * k + m) % N] += g[m]
    M.setflags(write=False)
    return M


def max_levels(side: int) -> int:
    J = 0
    while side % 2 == 0 and side >= 2:
        side //= 2
        J += 1
    return J


class WaveletFrame:
    """Per-image orthonormal 2-D DWT with periodic boundaries.

    Coefficients use the Mallat layout on the ``side x side`` array (coarse
    approximation in the top-left corner) and are flattened row-major, so
    ``forward`` and ``inverse`` map length-``n`` vectors (or stacks of them,
    shape ``(..., n)``) to the same shape.  ``forward`` is ``W^T`` and
    ``inverse`` is ``W`` with ``W W^T = W^T W = I``.
    """

    def __init__(self, side: int, wavelet: str = "haar", levels: int | None = None):
        self.side = int(side)
        self.wavelet = ALIASES.get(wavelet.lower(), wavelet.lower())
        lowpass(self.wavelet)
        top = max_levels(self.side)
        if levels is None:
            levels = max(1, top - 2)
        if not 1 <= levels <= top:
            raise ValueError(f"side {side} supports between 1 and {top} levels, got {levels}")
        self.levels = int(levels)
        self._mats = [analysis_matrix(self.wavelet, self.side >> j) for j in range(self.levels)]

    @property
    def n(self) -> int:
        return self.side * self.side

    def same_as(self, other) -> bool:
        return (
            isinstance(other, WaveletFrame)
            and other.side == self.side
            and other.wavelet == self.wavelet
            and other.levels == self.levels
        )

    def _as_images(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise ValueError(f"expected trailing dimension {self.n}, got {x.shape}")
        return x.reshape(x.shape[:-1] + (self.side, self.side))

    def forward(self, x):
        a = self._as_images(x).copy()
        for j, M in enumerate(self._mats):
            N = self.side >> j
            blk = a[..., :N, :N]
            a[..., :N, :N] = M @ blk @ M.T
        return a.reshape(np.shape(x))

    def inverse(self, c):
        a = self._as_images(c).copy()
        for j in reversed(range(self.levels)):
            M = self._mats[j]
            N = self.side >> j
            blk = a[..., :N, :N]
            a[..., :N, :N] = M.T @ blk @ M
        return a.reshape(np.shape(c))

    def detail_mask(self) -> np.ndarray:
        """Boolean mask (length n) of detail coefficients."""
        coarse = self.side >> self.levels
        m = np.ones((self.side, self.side), dtype=bool)
        m[:coarse, :coarse] = False
        return m.ravel()

    def __repr__(self):
        return f"WaveletFrame(side={self.side}, wavelet={self.wavelet!r}, levels={self.levels})"


def dwt_forward(frame: WaveletFrame, image):
    return frame.forward(image)


def dwt_inverse(frame: WaveletFrame, coeffs):
    return frame.inverse(coeffs)
