"""Micro-benchmarks for the wavelet, rendering, encoding and attention kernels."""

from __future__ import annotations

import csv
import hashlib
import io
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .encoding import HashGridConfig, hash_encode, init_hash_tables
from .field import AttentionConfig, init_attention, mha
from .render import volume_render
from .tensor import Tensor, no_grad
from .wavelet import dwt2, idwt2

KERNELS = ("dwt2", "idwt2", "volume_render", "hash_encode", "mha")
DEFAULT_SIZES = {"dwt2": (64,), "idwt2": (64,), "volume_render": (1024,), "hash_encode": (4096,), "mha": (64,)}
# kernels whose inner loop is a BLAS matrix product, which may use several threads
BLAS_KERNELS = {"dwt2", "idwt2", "mha"}


@dataclass
class BenchReport:
    kernel: str
    size: int
    runs: int
    median_ms: float
    p95_ms: float
    checksum: str
    input_checksum: str
    parallel: str


def checksum(arr) -> str:
    """sha256 of the array rounded to 6 decimals, so bit-level float noise does not change it."""
    a = np.round(np.asarray(arr, dtype=np.float64), 6) + 0.0  # + 0.0 folds -0.0 into 0.0
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()[:16]


def _setup(kernel: str, size: int, rng: np.random.Generator) -> tuple[Callable[[], np.ndarray], np.ndarray]:
    """Build the timed closure and the array its input checksum is taken over."""
    if kernel == "dwt2":
        img = rng.random((size, size, 3))
        return (lambda: _bands_array(dwt2(img, "db2"))), img
    if kernel == "idwt2":
        img = rng.random((size, size, 3))
        bands = dwt2(img, "db2")
        return (lambda: idwt2(bands, "db2").data), img
    if kernel == "volume_render":
        s = 64
        sigma = rng.random((size, s)) * 5.0
        color = rng.random((size, s, 3))
        deltas = np.full((size, s), 1.0 / s)
        return (lambda: volume_render(sigma, color, deltas).color.data), sigma
    if kernel == "hash_encode":
        cfg = HashGridConfig()
        tables = init_hash_tables(cfg, rng)
        pts = rng.random((size, 3))
        return (lambda: hash_encode(pts, cfg, tables).data), pts
    if kernel == "mha":
        cfg = AttentionConfig(heads=2, model_dim=95)
        weights = init_attention(cfg, rng)
        tokens = Tensor(rng.normal(size=(size, 95)))
        return (lambda: mha(tokens, cfg, weights).data), tokens.data
    raise ValueError(f"unknown kernel {kernel!r}; choose from {', '.join(KERNELS)}")


def _bands_array(bands) -> np.ndarray:
    return np.stack([bands[b].data for b in ("LL", "LH", "HL", "HH")])


def bench(kernel: str, size: int, seed: int = 0, runs: int = 30, warmup: int = 2) -> BenchReport:
    """Time ``runs`` calls after ``warmup`` discarded ones; inputs are drawn from ``seed``."""
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; choose from {', '.join(KERNELS)}")
    if runs < 30:
        raise ValueError("bench: at least 30 timed runs are required")
    if size < 1:
        raise ValueError("bench: size must be positive")
    rng = np.random.default_rng(seed)
    with no_grad():
        fn, inp = _setup(kernel, size, rng)
        for _ in range(warmup):
            fn()
        times = []
        out = None
        for _ in range(runs):
            t0 = time.perf_counter()
            out = fn()
            times.append(time.perf_counter() - t0)
    ms = np.array(times) * 1e3
    return BenchReport(kernel, size, runs, float(np.median(ms)), float(np.percentile(ms, 95)),
                       checksum(out), checksum(inp), "blas" if kernel in BLAS_KERNELS else "none")


def run_benchmarks(kernels=KERNELS, sizes=None, seed: int = 0, runs: int = 30) -> list[BenchReport]:
    reports = []
    for k in kernels:
        for s in (sizes or DEFAULT_SIZES[k]):
            reports.append(bench(k, int(s), seed, runs))
    return reports


def to_csv(reports) -> str:
    buf = io.StringIO()
    names = list(BenchReport.__dataclass_fields__)
    writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        row = asdict(r)
        row["median_ms"] = f"{r.median_ms:.6f}"
        row["p95_ms"] = f"{r.p95_ms:.6f}"
        writer.writerow(row)
    return buf.getvalue()
