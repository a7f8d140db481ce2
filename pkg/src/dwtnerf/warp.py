"""Pose interpolation, depth-based reprojection, bilinear sampling and the novel-pose DW loss."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .render import Camera, check_rigid
from .tensor import Tensor, as_tensor, concat, gather_rows, where
from .wavelet import BANDS, _band_weights, _matrices, _resolve, dwt2_multilevel

COORD_EPS = 1e-6


# ------------------------------------------------------------------ rotations
def _skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_log(R: np.ndarray) -> np.ndarray:
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * vee
    if np.pi - theta < 1e-6:
        raise ValueError("interpolate_pose: relative rotation of 180 degrees has no unique geodesic")
    return theta / (2.0 * np.sin(theta)) * vee


def so3_exp(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    K = _skew(w)
    if theta < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + np.sin(theta) / theta * K + (1.0 - np.cos(theta)) / theta ** 2 * K @ K


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def interpolate_pose(p_i: np.ndarray, p_j: np.ndarray, alpha: float) -> np.ndarray:
    """Rigid blend ``alpha * p_i + (1 - alpha) * p_j``: geodesic rotation, linear translation."""
    p_i = check_rigid(p_i, "p_i")
    p_j = check_rigid(p_j, "p_j")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"interpolate_pose: alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return p_i.copy()
    if alpha == 0.0:
        return p_j.copy()
    Ri, Rj = p_i[:3, :3], p_j[:3, :3]
    R = _orthonormalize(Rj @ so3_exp(alpha * so3_log(Rj.T @ Ri)))
    out = np.eye(4)
    out[:3, :3] = R
    out[:3, 3] = alpha * p_i[:3, 3] + (1.0 - alpha) * p_j[:3, 3]
    return out


# ----------------------------------------------------------------- projection
def relative_transform(cam_src: Camera, cam_dst: Camera) -> np.ndarray:
    """4x4 map from vision-convention coordinates of ``cam_src`` to those of ``cam_dst``."""
    return cam_dst.world_to_vision() @ np.linalg.inv(cam_src.world_to_vision())


def ray_to_z_depth(ray_depth, pixels_uv, K: np.ndarray):
    """Convert distance along the unit ray through ``pixels_uv`` into optical-axis depth."""
    px = np.asarray(pixels_uv, dtype=np.float64).reshape(-1, 2)
    rays = np.concatenate([px, np.ones((len(px), 1))], axis=1) @ np.linalg.inv(K).T
    scale = 1.0 / np.linalg.norm(rays, axis=1)
    if isinstance(ray_depth, Tensor):
        return ray_depth.reshape(-1) * scale
    return np.asarray(ray_depth, dtype=np.float64).reshape(-1) * scale


def project_pixels(pixels_uv, depth, K: np.ndarray, T: np.ndarray, K_dst: np.ndarray | None = None):
    """``K_dst T (D K^-1 x)`` with perspective division.

    ``depth`` is optical-axis depth per pixel (array or Tensor). Returns the
    projected (u, v) coordinates as a Tensor plus a validity mask that is False
    for non-positive source depth or points behind the target camera.
    Out-of-bounds coordinates are returned as is.
    """
    px = np.asarray(pixels_uv, dtype=np.float64).reshape(-1, 2)
    K_dst = K if K_dst is None else K_dst
    depth = as_tensor(depth).reshape(-1)
    if depth.shape[0] != len(px):
        raise ValueError(f"project_pixels: {len(px)} pixels but {depth.shape[0]} depths")
    rays = np.concatenate([px, np.ones((len(px), 1))], axis=1) @ np.linalg.inv(K).T  # (m, 3), z = 1
    pts = depth.reshape(-1, 1) * rays
    M = K_dst @ T[:3, :3]
    b = K_dst @ T[:3, 3]
    h = pts @ M.T + b  # homogeneous image coordinates
    valid = (depth.data > 0) & (h.data[:, 2] > 1e-12)
    denom = where(valid, h[:, 2], 1.0)
    coords = concat([(h[:, 0] / denom).reshape(-1, 1), (h[:, 1] / denom).reshape(-1, 1)], axis=1)
    return coords, valid


def bilinear_sample(image, coords):
    """Sample ``image`` (H, W, C) at (u, v) = (col, row) coordinates.

    Returns ``(values (m, C), mask (m,))``. The mask is False where any of the
    four neighbours would leave the grid; those rows are zero and carry no
    gradient to the image.
    """
    image = as_tensor(image)
    coords = as_tensor(coords).reshape(-1, 2)
    if image.ndim == 2:
        image = image.reshape(image.shape + (1,))
    H, W, C = image.shape
    if H < 2 or W < 2:
        raise ValueError("bilinear_sample: image must be at least 2x2")
    u, v = coords.data[:, 0], coords.data[:, 1]
    mask = (u >= -COORD_EPS) & (u <= W - 1 + COORD_EPS) & (v >= -COORD_EPS) & (v <= H - 1 + COORD_EPS)
    uc = where(mask, coords[:, 0], 0.0)
    vc = where(mask, coords[:, 1], 0.0)
    x0 = np.clip(np.floor(uc.data), 0, W - 2).astype(np.int64)
    y0 = np.clip(np.floor(vc.data), 0, H - 2).astype(np.int64)
    fu = (uc - x0).reshape(-1, 1)
    fv = (vc - y0).reshape(-1, 1)
    flat = image.reshape(H * W, C)
    i00 = gather_rows(flat, y0 * W + x0)
    i01 = gather_rows(flat, y0 * W + x0 + 1)
    i10 = gather_rows(flat, (y0 + 1) * W + x0)
    i11 = gather_rows(flat, (y0 + 1) * W + x0 + 1)
    top = i00 + (i01 - i00) * fu
    bottom = i10 + (i11 - i10) * fu
    values = (top + (bottom - top) * fv) * mask.reshape(-1, 1)
    return values, mask


@dataclass
class WarpResult:
    image: Tensor       # (side, side, 3)
    mask: np.ndarray    # (side, side) bool
    coords: Tensor      # (side, side, 2)

    @property
    def valid_fraction(self) -> float:
        return float(self.mask.mean())

    @property
    def masked_fraction(self) -> float:
        return 1.0 - self.valid_fraction


def patch_pixels(side: int, top: int, left: int) -> np.ndarray:
    """(u, v) coordinates of a row-major patch."""
    rows, cols = np.meshgrid(np.arange(top, top + side), np.arange(left, left + side), indexing="ij")
    return np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)


def warp_to_pose(source_image, ray_depth, side: int, top: int, left: int,
                 cam_novel: Camera, cam_known: Camera) -> WarpResult:
    """Pseudo ground truth at the novel pose: reproject each patch pixel through its
    rendered depth into the known view and sample the known image there."""
    px = patch_pixels(side, top, left)
    z = ray_to_z_depth(as_tensor(ray_depth).reshape(-1), px, cam_novel.K)
    T = relative_transform(cam_novel, cam_known)
    coords, ok = project_pixels(px, z, cam_novel.K, T, K_dst=cam_known.K)
    values, inside = bilinear_sample(source_image, coords)
    mask = ok & inside
    values = values * mask.reshape(-1, 1)
    return WarpResult(values.reshape(side, side, -1), mask.reshape(side, side), coords.reshape(side, side, 2))


def _support_pattern(order: int, n: int) -> np.ndarray:
    lo, hi = _matrices(order, n)
    return ((lo != 0) | (hi != 0)).astype(np.float64)


def band_validity(mask: np.ndarray, filt, levels: int = 1) -> list[np.ndarray]:
    """Per level, which coefficients draw only on valid pixels (entire filter support)."""
    filt = _resolve(filt)
    invalid = (~np.asarray(mask, dtype=bool)).astype(np.float64)
    out = []
    for _ in range(levels):
        n = invalid.shape[0]
        P = _support_pattern(filt.order, n)
        invalid = ((P @ invalid @ P.T) > 0).astype(np.float64)
        out.append(invalid == 0)
    return out


def masked_dw_loss(pred, target, mask, weights=(0.4, 0.2, 0.2, 0.2), filt="haar", levels: int = 1):
    """DW loss restricted to coefficients whose support is fully valid.

    Returns ``(loss, counted)`` where ``counted`` is the number of coefficients used.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"masked_dw_loss: shape mismatch {pred.shape} vs {target.shape}")
    w = _band_weights(weights)
    diff = pred - target
    pyramid = dwt2_multilevel(diff, filt, levels)
    validity = band_validity(mask, filt, levels)
    channels = pred.shape[2] if pred.ndim == 3 else 1
    total = None
    counted = 0
    for i, (bands, valid) in enumerate(zip(pyramid, validity)):
        last = i == len(pyramid) - 1
        count = int(valid.sum())
        if count == 0:
            continue
        sel = valid[..., None] if pred.ndim == 3 else valid
        for b in BANDS:
            if (b == "LL" and not last) or w[b] == 0.0:
                continue
            counted += count
            term = (bands[b].square() * sel).sum() * (w[b] / (count * channels))
            total = term if total is None else total + term
    if total is None:
        return (diff * 0.0).sum(), 0
    return total, counted


def novel_dw_loss(render, ray_depth, top: int, left: int, source_image, cam_novel: Camera,
                  cam_known: Camera, filt="haar", weights=(0.4, 0.2, 0.2, 0.2), levels: int = 1):
    """DW loss between a patch rendered at a novel pose and the known view warped into it.

    Returns ``(loss, WarpResult)``. A fully invalid warp contributes zero.
    """
    render = as_tensor(render)
    side = render.shape[0]
    warped = warp_to_pose(source_image, ray_depth, side, top, left, cam_novel, cam_known)
    loss, counted = masked_dw_loss(render, warped.image, warped.mask, weights, filt, levels)
    if counted == 0:
        warnings.warn("novel_dw_loss: warp left no valid wavelet coefficients", RuntimeWarning)
    return loss, warped
