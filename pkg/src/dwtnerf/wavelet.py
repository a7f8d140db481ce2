"""Orthogonal 2D discrete wavelet transforms (Haar, db2, db3) and the DW loss.

Transforms are written as matrix products ``L @ I @ L.T`` with periodic
shifting-row matrices, so they run through the tensor engine and are
differentiable with respect to the image. Colour images are (N, N, C) and each
channel is transformed independently.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, concat

BANDS = ("LL", "LH", "HL", "HH")

_SQ3 = math.sqrt(3.0)
_SQ10 = math.sqrt(10.0)
_R = math.sqrt(5.0 + 2.0 * _SQ10)

# Unnormalised coefficients and their normalisation factor. db3 has no compact
# integer form in the table it is usually printed in, so the closed-form
# radicals are used here instead of 4-decimal values.
_RAW = {
    1: ((1.0, 1.0), math.sqrt(2.0)),
    2: ((1 + _SQ3, 3 + _SQ3, 3 - _SQ3, 1 - _SQ3), 4 * math.sqrt(2.0)),
    3: ((1 + _SQ10 + _R, 5 + _SQ10 + 3 * _R, 10 - 2 * _SQ10 + 2 * _R,
         10 - 2 * _SQ10 - 2 * _R, 5 + _SQ10 - 3 * _R, 1 + _SQ10 - _R), 16 * math.sqrt(2.0)),
}
_NAMES = {"haar": 1, "db1": 1, "db2": 2, "db3": 3}


def make_highpass(lowpass: Sequence[float]) -> np.ndarray:
    """Alternating-flip high-pass: ``h[k] = (-1)**k * l[N-1-k]``."""
    lo = np.asarray(lowpass, dtype=np.float64)
    n = lo.size
    if n == 0 or n % 2:
        raise ValueError(f"make_highpass: filter length must be even and positive, got {n}")
    signs = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    return signs * lo[::-1]


@dataclass(frozen=True)
class WaveletFilter:
    order: int
    lowpass: np.ndarray
    highpass: np.ndarray

    @property
    def length(self) -> int:
        return self.lowpass.size

    @property
    def name(self) -> str:
        return "haar" if self.order == 1 else f"db{self.order}"


@functools.lru_cache(maxsize=None)
def get_filter(name: str | int) -> WaveletFilter:
    """Look up a Daubechies filter by name (``haar``, ``db2``, ``db3``) or order."""
    order = name if isinstance(name, int) else _NAMES.get(str(name).lower())
    if order not in _RAW:
        raise ValueError(f"unknown wavelet {name!r}; choose from haar, db2, db3")
    raw, factor = _RAW[order]
    lo = np.array(raw, dtype=np.float64) / factor
    lo.setflags(write=False)
    hi = make_highpass(lo)
    hi.setflags(write=False)
    return WaveletFilter(order, lo, hi)


def _resolve(filt) -> WaveletFilter:
    return filt if isinstance(filt, WaveletFilter) else get_filter(filt)


@functools.lru_cache(maxsize=64)
def _matrices(order: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    filt = get_filter(order)
    k = np.arange(filt.length)
    lo = np.zeros((n // 2, n))
    hi = np.zeros((n // 2, n))
    for row in range(n // 2):
        cols = (2 * row + k) % n
        np.add.at(lo[row], cols, filt.lowpass)
        np.add.at(hi[row], cols, filt.highpass)
    lo.setflags(write=False)
    hi.setflags(write=False)
    return lo, hi


def analysis_matrices(filt, n: int) -> tuple[np.ndarray, np.ndarray]:
    """The (n/2, n) low- and high-pass matrices built from shifted filter rows, wrapping periodically."""
    filt = _resolve(filt)
    _check_side(n, filt)
    return _matrices(filt.order, n)


def _check_side(n: int, filt: WaveletFilter) -> None:
    if n % 2:
        raise ValueError(f"image side must be even, got {n}")
    if n < filt.length:
        raise ValueError(f"image side {n} is smaller than the {filt.name} support ({filt.length})")


@dataclass
class SubBands:
    LL: Tensor
    LH: Tensor
    HL: Tensor
    HH: Tensor
    level: int = 1

    def __getitem__(self, band: str) -> Tensor:
        if band not in BANDS:
            raise KeyError(band)
        return getattr(self, band)

    def items(self):
        return ((b, getattr(self, b)) for b in BANDS)


def _channels_first(image: Tensor) -> tuple[Tensor, bool]:
    if image.ndim == 2:
        return image, False
    if image.ndim == 3:
        return image.transpose(2, 0, 1), True
    raise ValueError(f"expected (N, N) or (N, N, C) image, got shape {image.shape}")


def _channels_last(x: Tensor, had_channels: bool) -> Tensor:
    return x.transpose(1, 2, 0) if had_channels else x


def dwt2(image, filt="haar") -> SubBands:
    """One level of the separable 2D transform.

    Returns bands of side N/2: ``LL = L I Lᵀ``, ``LH = H I Lᵀ``,
    ``HL = L I Hᵀ``, ``HH = H I Hᵀ``.
    """
    filt = _resolve(filt)
    image = as_tensor(image)
    if image.ndim not in (2, 3) or image.shape[0] != image.shape[1]:
        raise ValueError(f"dwt2: expected a square (N, N[, C]) image, got shape {image.shape}")
    n = image.shape[0]
    _check_side(n, filt)
    lo, hi = _matrices(filt.order, n)
    x, chan = _channels_first(image)
    xl = x @ lo.T
    xh = x @ hi.T
    return SubBands(
        LL=_channels_last(Tensor(lo) @ xl, chan),
        LH=_channels_last(Tensor(hi) @ xl, chan),
        HL=_channels_last(Tensor(lo) @ xh, chan),
        HH=_channels_last(Tensor(hi) @ xh, chan),
    )


def idwt2(bands: SubBands, filt="haar") -> Tensor:
    """Inverse of :func:`dwt2` (exact up to rounding, since the analysis matrix is orthogonal)."""
    filt = _resolve(filt)
    shapes = {b: bands[b].shape for b in BANDS}
    if len(set(shapes.values())) != 1:
        raise ValueError(f"idwt2: sub-band shapes differ: {shapes}")
    shape = bands.LL.shape
    if len(shape) not in (2, 3) or shape[0] != shape[1]:
        raise ValueError(f"idwt2: expected square bands, got shape {shape}")
    n = 2 * shape[0]
    _check_side(n, filt)
    lo, hi = _matrices(filt.order, n)
    chan = len(shape) == 3
    ll, lh, hl, hh = (_channels_first(as_tensor(bands[b]))[0] for b in BANDS)
    lo_t, hi_t = Tensor(lo), Tensor(hi)
    rows_lo = lo_t.T @ ll @ lo_t + hi_t.T @ lh @ lo_t
    rows_hi = lo_t.T @ hl @ hi_t + hi_t.T @ hh @ hi_t
    return _channels_last(rows_lo + rows_hi, chan)


def dwt2_multilevel(image, filt="haar", levels: int = 1) -> list[SubBands]:
    """Recursive decomposition of the LL band; element ``k`` holds level ``k+1``."""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    image = as_tensor(image)
    n = image.shape[0]
    if n % (2 ** levels):
        raise ValueError(f"side {n} is not divisible by 2**{levels}")
    out = []
    current = image
    for lvl in range(1, levels + 1):
        bands = dwt2(current, filt)
        bands.level = lvl
        out.append(bands)
        current = bands.LL
    return out


def _band_weights(weights) -> dict[str, float]:
    if isinstance(weights, Mapping):
        w = {b: float(weights[b]) for b in BANDS}
    else:
        w = dict(zip(BANDS, (float(v) for v in weights)))
        if len(w) != 4:
            raise ValueError("need four sub-band weights (LL, LH, HL, HH)")
    for b, v in w.items():
        if v < 0:
            raise ValueError(f"sub-band weight for {b} must be >= 0, got {v}")
    return w


def dw_loss(pred, gt, weights=(0.4, 0.2, 0.2, 0.2), filt="haar", levels: int = 1) -> Tensor:
    """Weighted sub-band squared error between a rendered patch and its ground truth.

    Each band contributes ``weight * mean((pred_band - gt_band)**2)``. With
    ``levels > 1`` the LL weight applies to the coarsest LL band only, while the
    detail weights apply to the detail bands of every level.
    """
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"dw_loss: shape mismatch {pred.shape} vs {gt.shape}")
    w = _band_weights(weights)
    # the transform is linear, so decompose the difference once
    diff = pred - gt
    pyramid = dwt2_multilevel(diff, filt, levels)
    total = None
    for i, bands in enumerate(pyramid):
        last = i == len(pyramid) - 1
        for b in BANDS:
            if (b == "LL" and not last) or w[b] == 0.0:
                continue
            term = bands[b].square().mean() * w[b]
            total = term if total is None else total + term
    return total if total is not None else (diff * 0.0).sum()


def band_grid(pyramid: Sequence[SubBands]) -> np.ndarray:
    """Pack a pyramid into the usual single-image layout (LL top-left, recursively)."""
    ll = pyramid[-1].LL.data
    for bands in reversed(pyramid):
        top = np.concatenate([ll, bands.HL.data], axis=1)
        bottom = np.concatenate([bands.LH.data, bands.HH.data], axis=1)
        ll = np.concatenate([top, bottom], axis=0)
    return ll


def stack_bands(bands: SubBands) -> Tensor:
    """Concatenate the four bands along a new leading axis."""
    parts = [bands[b].reshape((1,) + bands[b].shape) for b in BANDS]
    return concat(parts, axis=0)
