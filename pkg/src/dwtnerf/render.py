"""Cameras, rays, point sampling and the volume-rendering quadrature.

Camera poses are camera-to-world matrices in the look-down-minus-z convention
(x right, y up). Pixel ``(row, col)`` has image coordinates ``u = col``,
``v = row`` with no half-pixel offset, so the principal point is itself a pixel
position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, concat, exp, no_grad

# Maps camera coordinates between the minus-z (graphics) and plus-z (vision) conventions.
FLIP = np.diag([1.0, -1.0, -1.0])


def check_rigid(pose: np.ndarray, what: str = "pose", tol: float = 1e-6) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValueError(f"{what}: expected a 4x4 matrix, got shape {pose.shape}")
    if not np.isfinite(pose).all():
        raise ValueError(f"{what}: non-finite entries")
    R = pose[:3, :3]
    if np.abs(R @ R.T - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError(f"{what}: rotation block is not orthonormal with determinant +1")
    if np.abs(pose[3] - [0, 0, 0, 1]).max() > tol:
        raise ValueError(f"{what}: last row must be [0, 0, 0, 1]")
    return pose


def intrinsics(focal: float, cx: float, cy: float, fy: float | None = None) -> np.ndarray:
    return np.array([[focal, 0.0, cx], [0.0, focal if fy is None else fy, cy], [0.0, 0.0, 1.0]])


@dataclass
class Camera:
    K: np.ndarray
    pose: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        if self.K.shape != (3, 3):
            raise ValueError(f"Camera: K must be 3x3, got {self.K.shape}")
        self.pose = check_rigid(self.pose, "Camera pose")
        if self.width < 1 or self.height < 1:
            raise ValueError("Camera: width and height must be positive")

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    def world_to_vision(self) -> np.ndarray:
        """4x4 map from world points to vision-convention camera coordinates (z forward, y down)."""
        inv = np.linalg.inv(self.pose)
        out = np.eye(4)
        out[:3, :3] = FLIP @ inv[:3, :3]
        out[:3, 3] = FLIP @ inv[:3, 3]
        return out


@dataclass
class Patch:
    side: int
    top: int
    left: int
    view: int = 0


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    layout: Patch | None = None  # None means random layout
    pixels: np.ndarray | None = None
    views: np.ndarray | None = None

    def __post_init__(self):
        n = self.origins.shape[0]
        if self.directions.shape != (n, 3) or self.origins.shape != (n, 3):
            raise ValueError("RayBatch: origins/directions must both be (n, 3)")
        self.near = np.broadcast_to(np.asarray(self.near, dtype=np.float64), (n,)).copy()
        self.far = np.broadcast_to(np.asarray(self.far, dtype=np.float64), (n,)).copy()
        if np.any(self.near >= self.far):
            raise ValueError("RayBatch: t_near must be < t_far for every ray")
        if n and np.abs(np.linalg.norm(self.directions, axis=1) - 1.0).max() > 1e-9:
            raise ValueError("RayBatch: directions must be unit length")
        if self.layout is not None and n != self.layout.side ** 2:
            raise ValueError(f"RayBatch: patch of side {self.layout.side} needs {self.layout.side ** 2} rays, got {n}")

    def __len__(self) -> int:
        return self.origins.shape[0]


@dataclass
class RenderOutput:
    color: Tensor
    depth: Tensor
    weights: Tensor
    transmittance: Tensor
    t: np.ndarray | None = None
    deltas: np.ndarray | None = None
    near: np.ndarray | None = None
    far: np.ndarray | None = None
    final_transmittance: Tensor | None = None

    def normalized_samples(self) -> tuple[np.ndarray, np.ndarray]:
        """Sample positions and bin widths rescaled so each ray spans [0, 1]."""
        span = (self.far - self.near)[:, None]
        return (self.t - self.near[:, None]) / span, self.deltas / span


def generate_rays(camera: Camera, pixels, near: float = 0.0, far: float = 1.0) -> RayBatch:
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if pixels.shape[1] != 2:
        raise ValueError(f"generate_rays: pixels must be (m, 2) (row, col), got {pixels.shape}")
    rows, cols = pixels[:, 0], pixels[:, 1]
    if np.any(rows < 0) or np.any(rows > camera.height - 1) or np.any(cols < 0) or np.any(cols > camera.width - 1):
        raise ValueError("generate_rays: pixel outside the image grid")
    homog = np.stack([cols, rows, np.ones_like(rows)], axis=1)
    cam = homog @ np.linalg.inv(camera.K).T @ FLIP
    world = cam @ camera.pose[:3, :3].T
    world /= np.linalg.norm(world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, world.shape).copy()
    return RayBatch(origins, world, near, far, pixels=pixels)


def sample_points(batch: RayBatch, n_samples: int, stratified: bool = False,
                  rng: np.random.Generator | int | None = None, near=None, far=None):
    """Partition each ray's interval into ``n_samples`` equal bins and pick one point per bin.

    Returns ``(positions (n, s, 3), deltas (n, s), t (n, s))`` where ``deltas``
    are the bin widths and ``t`` the bin midpoints, or one uniform draw per bin
    when ``stratified``.
    """
    if n_samples < 1:
        raise ValueError("sample_points: n_samples must be >= 1")
    near = batch.near if near is None else np.asarray(near, dtype=np.float64)
    far = batch.far if far is None else np.asarray(far, dtype=np.float64)
    u = np.linspace(0.0, 1.0, n_samples + 1)
    edges = near[:, None] + (far - near)[:, None] * u[None, :]
    lo, hi = edges[:, :-1], edges[:, 1:]
    if stratified:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        t = lo + (hi - lo) * rng.random(lo.shape)
    else:
        t = 0.5 * (lo + hi)
    positions = batch.origins[:, None, :] + t[..., None] * batch.directions[:, None, :]
    return positions, hi - lo, t


def volume_render(sigma, color, deltas, t=None) -> RenderOutput:
    """Alpha-compositing quadrature of the emission-absorption integral.

    ``T_i = exp(-sum_{j<i} sigma_j delta_j)``, ``w_i = T_i (1 - exp(-sigma_i delta_i))``,
    colour ``sum w_i c_i`` and depth ``sum w_i t_i``. Unabsorbed light composites onto black.
    """
    sigma, color = as_tensor(sigma), as_tensor(color)
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(sigma.data < 0):
        raise ValueError("volume_render: negative density")
    if np.any(deltas <= 0):
        raise ValueError("volume_render: bin widths must be positive")
    if color.shape != sigma.shape + (3,) or deltas.shape != sigma.shape:
        raise ValueError(f"volume_render: sigma {sigma.shape}, color {color.shape}, deltas {deltas.shape} disagree")
    if t is None:
        t = np.cumsum(deltas, axis=-1) - 0.5 * deltas
    t = np.asarray(t, dtype=np.float64)
    optical = sigma * deltas
    accumulated = optical.cumsum(axis=-1)
    # exclusive prefix sum by shifting, not by subtracting, so T stays exactly monotone
    zero = Tensor(np.zeros(sigma.shape[:-1] + (1,)))
    trans = exp(-concat([zero, accumulated[..., :-1]], axis=-1))
    weights = trans * (1.0 - exp(-optical))
    rgb = (weights.reshape(weights.shape + (1,)) * color).sum(axis=-2)
    depth = (weights * t).sum(axis=-1)
    final = exp(-accumulated[..., -1])
    return RenderOutput(rgb, depth, weights, trans, t=t, deltas=deltas, final_transmittance=final)


def box_interval(origins: np.ndarray, directions: np.ndarray, lo=0.0, hi=1.0):
    """Slab test against an axis-aligned box; returns (t_enter, t_exit), empty when exit <= enter."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    return tmin.max(axis=1), tmax.min(axis=1)


def render_rays(model, batch: RayBatch, n_samples: int, stratified: bool = False,
                rng: np.random.Generator | None = None) -> RenderOutput:
    """Sample, query the field and composite. Samples are confined to the unit cube.

    Each ray's interval is clipped to its overlap with the cube; rays that miss
    the cube keep their original bounds and see zero density.
    """
    enter, leave = box_interval(batch.origins, batch.directions)
    near = np.maximum(batch.near, enter)
    far = np.minimum(batch.far, leave)
    miss = far <= near
    near = np.where(miss, batch.near, near)
    far = np.where(miss, batch.far, far)
    positions, deltas, t = sample_points(batch, n_samples, stratified, rng, near=near, far=far)
    inside = np.all((positions >= 0.0) & (positions <= 1.0), axis=-1) & ~miss[:, None]
    sigma, color = model(np.clip(positions, 0.0, 1.0), batch.directions)
    sigma = sigma * inside
    out = volume_render(sigma, color, deltas, t)
    out.near, out.far = near, far
    return out


def render_image(model, camera: Camera, near: float, far: float, n_samples: int,
                 chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Render a full view in row-major chunks of ``chunk`` rays; returns colour and depth arrays."""
    H, W = camera.height, camera.width
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=1)
    rgb = np.empty((H * W, 3))
    depth = np.empty(H * W)
    with no_grad():
        for start in range(0, H * W, chunk):
            sl = slice(start, start + chunk)
            batch = generate_rays(camera, pixels[sl], near, far)
            out = render_rays(model, batch, n_samples)
            rgb[sl] = out.color.data
            depth[sl] = out.depth.data
    return rgb.reshape(H, W, 3), depth.reshape(H, W)


# ------------------------------------------------------------------ batching
@dataclass
class View:
    camera: Camera
    image: np.ndarray  # (H, W, 3) in [0, 1]
    near: float
    far: float
    name: str = ""


def sample_random_batch(views: Sequence[View], batch_size: int, rng) -> tuple[RayBatch, np.ndarray]:
    """Draw ``batch_size`` distinct pixels uniformly from all views."""
    if not views:
        raise ValueError("sample_random_batch: empty dataset")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    counts = np.array([v.camera.height * v.camera.width for v in views])
    total = int(counts.sum())
    if batch_size > total:
        raise ValueError(f"sample_random_batch: batch_size {batch_size} exceeds {total} pixels")
    flat = rng.choice(total, size=batch_size, replace=False)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    view_idx = np.searchsorted(offsets, flat, side="right") - 1
    local = flat - offsets[view_idx]
    origins = np.empty((batch_size, 3))
    dirs = np.empty((batch_size, 3))
    near = np.empty(batch_size)
    far = np.empty(batch_size)
    gt = np.empty((batch_size, 3))
    pixels = np.empty((batch_size, 2))
    for vi in np.unique(view_idx):
        sel = view_idx == vi
        view = views[vi]
        r, c = np.divmod(local[sel], view.camera.width)
        px = np.stack([r, c], axis=1)
        rays = generate_rays(view.camera, px, view.near, view.far)
        origins[sel], dirs[sel] = rays.origins, rays.directions
        near[sel], far[sel] = view.near, view.far
        gt[sel] = view.image[r, c]
        pixels[sel] = px
    return RayBatch(origins, dirs, near, far, pixels=pixels, views=view_idx), gt


def sample_patch_batch(views: Sequence[View], side: int, rng) -> tuple[RayBatch, np.ndarray]:
    """A contiguous ``side x side`` block of rays from one uniformly chosen view, row-major."""
    if not views:
        raise ValueError("sample_patch_batch: empty dataset")
    if side < 2 or side % 2:
        raise ValueError(f"sample_patch_batch: side must be even and >= 2, got {side}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    vi = int(rng.integers(len(views)))
    view = views[vi]
    H, W = view.camera.height, view.camera.width
    if side > min(H, W):
        raise ValueError(f"sample_patch_batch: side {side} exceeds image {H}x{W}")
    top = int(rng.integers(H - side + 1))
    left = int(rng.integers(W - side + 1))
    return patch_rays(view, side, top, left, vi)


def patch_rays(view: View, side: int, top: int, left: int, index: int = 0) -> tuple[RayBatch, np.ndarray]:
    rows, cols = np.meshgrid(np.arange(top, top + side), np.arange(left, left + side), indexing="ij")
    px = np.stack([rows.ravel(), cols.ravel()], axis=1)
    rays = generate_rays(view.camera, px, view.near, view.far)
    rays.layout = Patch(side, top, left, index)
    rays.views = np.full(side * side, index)
    gt = view.image[top:top + side, left:left + side].copy()
    return rays, gt
