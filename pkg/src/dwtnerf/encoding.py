"""Positional and directional encodings feeding the two field branches."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError, concat

PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    features_per_level: int = 2
    table_size: int = 2 ** 14
    base_resolution: int = 16
    growth_factor: float = (512 / 16) ** (1 / 15)

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.features_per_level < 1:
            raise ValueError("features_per_level must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError(f"table_size must be a power of two, got {self.table_size}")
        if self.base_resolution < 1:
            raise ValueError("base_resolution must be >= 1")
        if self.levels > 1 and not self.growth_factor > 1:
            raise ValueError(f"growth_factor must exceed 1, got {self.growth_factor}")

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def resolutions(self) -> np.ndarray:
        return np.array([int(math.floor(self.base_resolution * self.growth_factor ** l))
                         for l in range(self.levels)], dtype=np.int64)

    def dense(self) -> np.ndarray:
        """Per level: True when every grid vertex fits in the table without hashing."""
        return (self.resolutions() + 1) ** 3 <= self.table_size


def init_hash_tables(config: HashGridConfig, rng: np.random.Generator, scale: float = 1e-4) -> Tensor:
    data = rng.uniform(-scale, scale, size=(config.levels, config.table_size, config.features_per_level))
    return Tensor(data, requires_grad=True, name="hash_tables")


def _corner_indices(cell: np.ndarray, res: np.ndarray, dense: np.ndarray, table_size: int) -> np.ndarray:
    """cell: (N, L, 3) integer base corners -> (N, L, 8) table rows, corner c = (c&1, c>>1&1, c>>2&1)."""
    # per axis, the two candidate coordinates of each cell: (N, L, 3, 2)
    coords = cell[..., None] + np.array([0, 1], dtype=np.int64)
    side = (res + 1)[None, :, None]
    x, y, z = coords[:, :, 0], coords[:, :, 1], coords[:, :, 2]
    dense_idx = (x[:, :, None, None, :] + side[..., None, None] * y[:, :, None, :, None]
                 + (side * side)[..., None, None] * z[:, :, :, None, None])
    c = coords.astype(np.uint64)
    hx = c[:, :, 0] * np.uint64(PRIMES[0])
    hy = c[:, :, 1] * np.uint64(PRIMES[1])
    hz = c[:, :, 2] * np.uint64(PRIMES[2])
    hashed = hx[:, :, None, None, :] ^ hy[:, :, None, :, None] ^ hz[:, :, :, None, None]
    hashed = (hashed & np.uint64(table_size - 1)).astype(np.int64)
    n, levels = cell.shape[:2]
    idx = np.where(dense[None, :, None, None, None], dense_idx, hashed)
    return idx.reshape(n, levels, 8)


def hash_encode(x: np.ndarray, config: HashGridConfig, tables: Tensor) -> Tensor:
    """Multi-resolution hash encoding of points in the unit cube.

    Output is (N, levels * features_per_level), level-major. Each level
    trilinearly interpolates the feature vectors at the 8 surrounding grid
    vertices; gradients flow to ``tables`` only.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ShapeError(f"hash_encode: expected (N, 3) points, got {x.shape}")
    if np.any(x < 0.0) or np.any(x > 1.0) or not np.isfinite(x).all():
        raise ValueError("hash_encode: coordinates must lie in [0, 1]^3")
    L, T, F = config.levels, config.table_size, config.features_per_level
    if tables.shape != (L, T, F):
        raise ShapeError(f"hash_encode: tables shape {tables.shape} != {(L, T, F)}")

    res = config.resolutions()
    scaled = x[:, None, :] * res[None, :, None]
    cell = np.minimum(np.floor(scaled).astype(np.int64), (res - 1)[None, :, None])
    frac = scaled - cell
    idx = _corner_indices(cell, res, config.dense(), T)

    # trilinear weights as an outer product of per-axis (1 - f, f) pairs, same corner order
    pair = np.stack([1.0 - frac, frac], axis=-1)  # (N, L, 3, 2)
    w = (pair[:, :, 2, :, None, None] * pair[:, :, 1, None, :, None]
         * pair[:, :, 0, None, None, :]).reshape(x.shape[0], L, 8)

    flat_idx = idx + (np.arange(L, dtype=np.int64) * T)[None, :, None]
    table_flat = tables.data.reshape(L * T, F)
    feats = np.einsum("nlc,nlcf->nlf", w, table_flat[flat_idx])  # (N, L, F)
    n = x.shape[0]

    def back(g):
        g = g.reshape(n, L, 1, F) * w[..., None]
        rows = flat_idx.reshape(-1)
        g = g.reshape(-1, F)
        out = np.empty((L * T, F))
        for f in range(F):
            out[:, f] = np.bincount(rows, weights=g[:, f], minlength=L * T)
        return (out.reshape(L, T, F),)

    return Tensor._from_op(feats.reshape(n, L * F), (tables,), back, "hash_encode")


# ------------------------------------------------------------- spherical harmonics
SH_DEGREE = 7
SH_BASIS = (SH_DEGREE + 1) ** 2


def _sh_norm(l: int, m: int) -> float:
    return math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))


_SH_NORMS = [[_sh_norm(l, m) for m in range(l + 1)] for l in range(SH_DEGREE + 1)]


def sh_encode(d: np.ndarray) -> np.ndarray:
    """Real spherical harmonics of degrees 0..7 (64 values per direction).

    Column ``l*l + l + m`` holds Y_l^m. Directions must already be unit length.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != 3:
        raise ShapeError(f"sh_encode: expected (N, 3) directions, got {d.shape}")
    norms = np.linalg.norm(d, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("sh_encode: directions must be unit vectors (|d| = 1 within 1e-6)")
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = np.empty((d.shape[0], SH_BASIS))

    # Q[l][m] = P_l^m(z) / sin^m(theta), built by the standard upward recursion
    # (Condon-Shortley phase dropped); (x + iy)^m supplies sin^m(theta) e^{i m phi}.
    xy = np.ones_like(x, dtype=np.complex128)
    powers = [xy]
    for _ in range(SH_DEGREE):
        xy = xy * (x + 1j * y)
        powers.append(xy)
    for m in range(SH_DEGREE + 1):
        q_prev = np.full_like(z, _double_factorial(2 * m - 1))
        q = [q_prev]
        if m + 1 <= SH_DEGREE:
            q.append(z * (2 * m + 1) * q_prev)
        for l in range(m + 2, SH_DEGREE + 1):
            q.append(((2 * l - 1) * z * q[-1] - (l + m - 1) * q[-2]) / (l - m))
        for l in range(m, SH_DEGREE + 1):
            base = _SH_NORMS[l][m] * q[l - m]
            if m == 0:
                out[:, l * l + l] = base
            else:
                scale = math.sqrt(2.0) * base
                out[:, l * l + l + m] = scale * powers[m].real
                out[:, l * l + l - m] = scale * powers[m].imag
    return out


def _double_factorial(n: int) -> float:
    r = 1.0
    while n > 1:
        r *= n
        n -= 2
    return r


def hybrid_concat(gx: Tensor, gd: Tensor) -> tuple[Tensor, Tensor]:
    """Split the hash features into the density input and the hybrid colour input.

    Returns ``(gx[:, :1], [gd, gx[:, 1:]])``.
    """
    if gx.shape[0] != gd.shape[0]:
        raise ShapeError(f"hybrid_concat: batch sizes differ ({gx.shape} vs {gd.shape})")
    if gx.shape[1] < 1:
        raise ShapeError("hybrid_concat: hash encoding has no columns")
    trimmed = gx[:, :1]
    hybrid = concat([gd, gx[:, 1:]], axis=1)
    return trimmed, hybrid
