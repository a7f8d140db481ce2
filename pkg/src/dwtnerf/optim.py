"""Adam with bias correction, plus the flat binary checkpoint format."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    """Raised when an update would consume NaN/inf gradients; no state was modified."""


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None],
              state: AdamState, lr: float | Mapping[str, float]) -> None:
    """Apply one Adam update in place.

    ``lr`` is either a scalar or a per-parameter mapping. Missing gradients
    count as zero. All gradients are validated before anything is touched, so
    a rejected step leaves both parameters and ``state`` unchanged.
    """
    rates = {name: float(lr[name] if isinstance(lr, Mapping) else lr) for name in params}
    for name, rate in rates.items():
        if not rate > 0:
            raise ValueError(f"adam_step: learning rate for {name!r} must be positive, got {rate}")
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteGradientError(f"adam_step: non-finite gradient for {name!r}")

    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= rates[name] * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Stateful wrapper over :func:`adam_step` for a dict of parameter tensors."""

    def __init__(self, params: Mapping[str, Tensor], lr: float | Mapping[str, float] = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        adam_step({k: p.data for k, p in self.params.items()},
                  {k: p.grad for k, p in self.params.items()},
                  self.state, self.lr)


# ---------------------------------------------------------------- checkpoints
# Layout: MAGIC, version byte, uint32 record count, then per record:
#   uint16 name length, utf-8 name, uint8 ndim, ndim x uint64 extents,
#   raw little-endian float64 data in row-major order.
MAGIC = b"DWTCKPT\0"
VERSION = 1


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")  # keeps 0-d shape
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    _atomic_write(path, b"".join(chunks))


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<BI", blob, pos)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 5
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes after last record")
    return out


def _atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
