"""Shared test utilities: central finite differences against the autodiff engine."""

from __future__ import annotations

import numpy as np

from dwtnerf.tensor import Tensor


def numeric_grad(fn, arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``arr`` (mutated in place and restored)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + eps
        hi = float(fn())
        arr[idx] = orig - eps
        lo = float(fn())
        arr[idx] = orig
        grad[idx] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def gradcheck(loss_fn, params: dict[str, Tensor], eps: float = 1e-6, max_entries: int | None = None,
              rng: np.random.Generator | None = None) -> dict[str, float]:
    """Relative error between analytic and numeric gradients for each named parameter.

    ``loss_fn()`` must build a fresh graph from the current parameter data.
    With ``max_entries`` only that many randomly chosen entries per tensor are probed.
    """
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    rng = rng or np.random.default_rng(0)
    out = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(loss_fn().data)
            flat[i] = orig
            num[j] = (hi - lo) / (2 * eps)
        out[name] = rel_err(analytic[name].reshape(-1)[idx], num)
    return out
