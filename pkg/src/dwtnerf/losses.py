"""Photometric loss, geometry regularisers, correspondence loss and the combined objective."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields
from typing import Callable, Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor, as_tensor, log, sqrt, where


@dataclass
class LossWeights:
    """Sub-band and regulariser weights.

    The sub-band defaults are the LLFF setting (LL 0.4, details 0.2). The
    regulariser weights are not published; 1e-3 is a conservative default.
    """

    ll: float = 0.4
    lh: float = 0.2
    hl: float = 0.2
    hh: float = 0.2
    dist: float = 1e-3
    fg: float = 1e-3
    ds: float = 1e-3
    kl: float = 1e-3
    mv: float = 1e-3

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    @property
    def subbands(self) -> dict[str, float]:
        return {"LL": self.ll, "LH": self.lh, "HL": self.hl, "HH": self.hh}

    @classmethod
    def synthetic_preset(cls) -> "LossWeights":
        return cls(ll=0.04, lh=0.02, hl=0.02, hh=0.02)


def mse_loss(pred, gt) -> Tensor:
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {gt.shape}")
    return (pred - gt).square().mean()


def distortion_loss(weights, midpoints, deltas) -> Tensor:
    """Per ray ``sum_ij w_i w_j |m_i - m_j| + 1/3 sum_i w_i^2 delta_i``, averaged over rays.

    ``midpoints`` and ``deltas`` must already be normalised to each ray's [0, 1] span.
    """
    w = as_tensor(weights)
    if np.any(w.data < 0):
        raise ValueError("distortion_loss: negative weights")
    m = np.asarray(midpoints, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    if m.shape != w.shape or d.shape != w.shape:
        raise ValueError(f"distortion_loss: shapes {w.shape}, {m.shape}, {d.shape} disagree")
    gaps = np.abs(m[..., :, None] - m[..., None, :])  # (n, s, s)
    row = w.reshape(w.shape[:-1] + (1, w.shape[-1]))
    pair = ((row @ Tensor(gaps)) * row).sum(axis=(-1, -2))
    self_term = (w.square() * d).sum(axis=-1) * (1.0 / 3.0)
    return (pair + self_term).mean()


def full_geometry_loss(weights) -> Tensor:
    """Mean over rays of ``(sum_i w_i - 1)^2``."""
    w = as_tensor(weights)
    if np.any(w.data < 0):
        raise ValueError("full_geometry_loss: negative weights")
    return (w.sum(axis=-1) - 1.0).square().mean()


def depth_smoothness_loss(depth, side: int | None = None) -> Tensor:
    """Mean squared horizontal plus mean squared vertical neighbour differences of a depth patch.

    ``depth`` is (side, side), or flat with ``side`` given. A flat depth vector
    without a patch side comes from a random batch and has no neighbours.
    """
    depth = as_tensor(depth)
    if depth.ndim == 1:
        if side is None:
            raise ValueError("depth_smoothness_loss: requires a patch-layout render")
        depth = depth.reshape(side, side)
    if depth.ndim != 2 or depth.shape[0] != depth.shape[1] or depth.shape[0] < 2:
        raise ValueError(f"depth_smoothness_loss: expected a square patch, got {depth.shape}")
    dh = depth[:, 1:] - depth[:, :-1]
    dv = depth[1:, :] - depth[:-1, :]
    return dh.square().mean() + dv.square().mean()


KL_EPS = 1e-10


def kl_consistency_loss(weights_ray, weights_neighbor) -> Tensor:
    """``KL(p || q)`` between normalised weight distributions, averaged over ray pairs."""
    a, b = as_tensor(weights_ray), as_tensor(weights_neighbor)
    if a.shape != b.shape:
        raise ValueError(f"kl_consistency_loss: shape mismatch {a.shape} vs {b.shape}")
    if np.any(a.data < 0) or np.any(b.data < 0):
        raise ValueError("kl_consistency_loss: negative weights")
    p = a + KL_EPS
    p = p / p.sum(axis=-1, keepdims=True)
    q = b + KL_EPS
    q = q / q.sum(axis=-1, keepdims=True)
    kl = (p * (log(p) - log(q))).sum(axis=-1)
    return kl.mean()


def kl_patch_loss(weights, side: int) -> Tensor:
    """KL consistency between horizontally adjacent rays of a row-major patch."""
    w = as_tensor(weights)
    grid = w.reshape(side, side, w.shape[-1])
    return kl_consistency_loss(grid[:, :-1], grid[:, 1:])


def huber(residuals, delta: float = 1.0) -> Tensor:
    """Huber penalty on the Euclidean norm of each residual row."""
    if not delta > 0:
        raise ValueError("huber: threshold must be positive")
    r = as_tensor(residuals)
    if r.ndim == 1:
        r = r.reshape(-1, 1)
    sq = r.square().sum(axis=-1)
    quad = sq.data <= delta * delta
    # evaluate the linear branch on a clamped copy so sqrt never sees zero
    safe = where(quad, delta * delta, sq)
    linear = (sqrt(safe) - 0.5 * delta) * delta
    return where(quad, sq * 0.5, linear)


# ---------------------------------------------------------------- matches
@dataclass
class MatchSet:
    view_i: int
    view_j: int
    xi: np.ndarray  # (m, 2) pixel coordinates (u, v) in view i
    xj: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=np.float64).reshape(-1, 2)
        self.xj = np.asarray(self.xj, dtype=np.float64).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        m = len(self.confidence)
        if len(self.xi) != m or len(self.xj) != m:
            raise ValueError("MatchSet: coordinate and confidence counts differ")
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise ValueError("MatchSet: confidences must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.confidence)

    def filtered(self, min_conf: float) -> "MatchSet":
        keep = self.confidence >= min_conf
        return MatchSet(self.view_i, self.view_j, self.xi[keep], self.xj[keep], self.confidence[keep])

    def check_bounds(self, size_i: tuple[int, int], size_j: tuple[int, int]) -> None:
        for name, x, (h, w) in (("i", self.xi, size_i), ("j", self.xj, size_j)):
            if np.any(x < 0) or np.any(x[:, 0] > w - 1) or np.any(x[:, 1] > h - 1):
                raise ValueError(f"MatchSet: coordinates in view {name} fall outside the {w}x{h} grid")


def read_matches(path) -> list[MatchSet]:
    """Parse ``view_i view_j u_i v_i u_j v_j confidence`` lines, grouped by view pair."""
    groups: dict[tuple[int, int], list[list[float]]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field") from None
            key = (int(vals[0]), int(vals[1]))
            groups.setdefault(key, []).append(vals[2:])
    out = []
    for (vi, vj), rows in groups.items():
        arr = np.array(rows)
        out.append(MatchSet(vi, vj, arr[:, 0:2], arr[:, 2:4], arr[:, 4]))
    return out


def write_matches(path, match_sets) -> None:
    with open(path, "w") as fh:
        fh.write("# view_i view_j u_i v_i u_j v_j confidence\n")
        for ms in match_sets:
            for a, b, c in zip(ms.xi, ms.xj, ms.confidence):
                vals = " ".join(repr(float(x)) for x in (a[0], a[1], b[0], b[1], c))
                fh.write(f"{ms.view_i} {ms.view_j} {vals}\n")


def _one_way(src_px, dst_px, conf, depth_fn, src_view, cam_src, cam_dst, delta):
    from .warp import project_pixels, ray_to_z_depth, relative_transform

    ray_depth = depth_fn(src_view, src_px)
    z = ray_to_z_depth(ray_depth, src_px, cam_src.K)
    T = relative_transform(cam_src, cam_dst)
    coords, _ = project_pixels(src_px, z, cam_src.K, T, K_dst=cam_dst.K)
    penalty = huber(coords - dst_px, delta)
    return (penalty * conf).mean()


def mv_correspondence_loss(matches: MatchSet, depth_fn: Callable, cameras, weight: float = 1e-3,
                           two_way: bool = True, min_conf: float = 0.5, delta: float = 1.0) -> Tensor:
    """Reprojection error of supplied matches through rendered depth.

    ``depth_fn(view_index, pixels_uv)`` returns the rendered ray-distance depth
    (a Tensor) at the given pixel coordinates. Matches below ``min_conf`` are
    discarded; the Huber penalties are confidence weighted and averaged.
    """
    kept = matches.filtered(min_conf)
    if len(kept) == 0:
        warnings.warn("mv_correspondence_loss: no matches survive the confidence filter", RuntimeWarning)
        return Tensor(0.0)
    ci, cj = cameras[kept.view_i], cameras[kept.view_j]
    kept.check_bounds((ci.height, ci.width), (cj.height, cj.width))
    forward = _one_way(kept.xi, kept.xj, kept.confidence, depth_fn, kept.view_i, ci, cj, delta)
    if not two_way:
        return forward * weight
    backward = _one_way(kept.xj, kept.xi, kept.confidence, depth_fn, kept.view_j, cj, ci, delta)
    return (forward + backward) * (0.5 * weight)


# ---------------------------------------------------------------- combined
UNIT_TERMS = ("mse", "dw", "dw_novel", "mv")
WEIGHTED_TERMS = {"dist": "dist", "fg": "fg", "ds": "ds", "kl": "kl"}
TERM_ORDER = UNIT_TERMS + tuple(WEIGHTED_TERMS)


def combined_loss(terms: Mapping[str, Tensor | None], weights: LossWeights) -> Tensor:
    """``mse + dw + dw_novel + mv + l_dist*dist + l_fg*fg + l_ds*ds + l_kl*kl`` over the present terms.

    The DW and correspondence terms carry their own weights already.
    """
    unknown = set(terms) - set(TERM_ORDER)
    if unknown:
        raise KeyError(f"combined_loss: unknown terms {sorted(unknown)}")
    if terms.get("mse") is None:
        raise ValueError("combined_loss: the photometric term is required")
    total = None
    for name in TERM_ORDER:
        term = terms.get(name)
        if term is None:
            continue
        value = float(term.data)
        if not math.isfinite(value):
            raise NonFiniteError(f"combined_loss: term {name!r} is not finite")
        if name in WEIGHTED_TERMS:
            term = term * getattr(weights, WEIGHTED_TERMS[name])
        total = term if total is None else total + term
    return total
