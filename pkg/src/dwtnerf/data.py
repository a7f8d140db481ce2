"""Dataset manifests, image I/O and analytically rendered synthetic scenes.

A dataset directory holds ``transforms.json`` (camera block, scene bounds,
frames with camera-to-world matrices, train/test split) and the referenced
8-bit RGB PNGs. Loading rescales the scene so the bounding box maps into the
unit cube with its longest side spanning [0, 1].
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .render import Camera, View, box_interval, check_rigid, generate_rays, intrinsics

MANIFEST = "transforms.json"
SCENE_FILE = "scene.json"


# ------------------------------------------------------------------ images
def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L"):
            raise ValueError(f"{path}: unsupported image mode {im.mode}")
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    """Write a [0, 1] float image (H, W[, 3]) as an 8-bit PNG, atomically."""
    data = to_uint8(img)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".png")
    os.close(fd)
    try:
        Image.fromarray(data).save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def normalize_for_display(arr: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; constant arrays map to zeros."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi - lo < 1e-12:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- manifest
@dataclass
class Frame:
    name: str
    file_path: str
    pose: np.ndarray


@dataclass
class DatasetManifest:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    box_min: np.ndarray
    box_max: np.ndarray
    near: float
    far: float
    frames: list[Frame]
    train: list[str]
    test: list[str]

    @property
    def K(self) -> np.ndarray:
        return intrinsics(self.fx, self.cx, self.cy, self.fy)

    def frame(self, name: str) -> Frame:
        for f in self.frames:
            if f.name == name:
                return f
        raise KeyError(f"no frame named {name!r}")

    def to_json(self) -> dict:
        return {
            "camera": {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                       "width": self.width, "height": self.height},
            "bounds": {"box_min": [float(v) for v in self.box_min], "box_max": [float(v) for v in self.box_max],
                       "near": self.near, "far": self.far},
            "frames": [{"name": f.name, "file_path": f.file_path,
                        "transform_matrix": np.asarray(f.pose).tolist()} for f in self.frames],
            "split": {"train": list(self.train), "test": list(self.test)},
        }


def write_manifest(path, manifest: DatasetManifest) -> None:
    write_text_atomic(path, json.dumps(manifest.to_json(), indent=2) + "\n")


def parse_manifest(blob: dict, source: str = "manifest") -> DatasetManifest:
    try:
        cam = blob["camera"]
        bounds = blob["bounds"]
        frames_raw = blob["frames"]
        split = blob.get("split", {})
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{source}: missing section {exc}") from None
    try:
        fx = float(cam.get("fx", cam.get("focal")))
        fy = float(cam.get("fy", fx))
        width, height = int(cam["width"]), int(cam["height"])
        cx = float(cam.get("cx", (width - 1) / 2.0))
        cy = float(cam.get("cy", (height - 1) / 2.0))
        box_min = np.asarray(bounds["box_min"], dtype=np.float64)
        box_max = np.asarray(bounds["box_max"], dtype=np.float64)
        near, far = float(bounds["near"]), float(bounds["far"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{source}: malformed camera or bounds block ({exc})") from None
    if box_min.shape != (3,) or box_max.shape != (3,) or np.any(box_max <= box_min):
        raise ValueError(f"{source}: scene box must have box_max > box_min in all three axes")
    if not 0 <= near < far:
        raise ValueError(f"{source}: need 0 <= near < far, got near={near}, far={far}")
    frames = []
    for i, fr in enumerate(frames_raw):
        name = str(fr.get("name", fr.get("file_path", f"frame_{i}")))
        try:
            pose = np.asarray(fr["transform_matrix"], dtype=np.float64)
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{source}: frame {name!r}: malformed transform_matrix ({exc})") from None
        try:
            check_rigid(pose, "transform_matrix")
        except ValueError as exc:
            raise ValueError(f"{source}: frame {name!r}: {exc}") from None
        if "file_path" not in fr:
            raise ValueError(f"{source}: frame {name!r}: missing file_path")
        frames.append(Frame(name, str(fr["file_path"]), pose))
    names = [f.name for f in frames]
    if len(set(names)) != len(names):
        raise ValueError(f"{source}: duplicate frame names")
    train = [str(n) for n in split.get("train", names)]
    test = [str(n) for n in split.get("test", [])]
    for n in train + test:
        if n not in names:
            raise ValueError(f"{source}: split references unknown frame {n!r}")
    return DatasetManifest(fx, fy, cx, cy, width, height, box_min, box_max, near, far, frames, train, test)


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{path}: manifest not found")
    try:
        blob = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None
    return parse_manifest(blob, str(path))


@dataclass
class Dataset:
    manifest: DatasetManifest
    train: list[View]
    test: list[View]
    scale: float
    offset: np.ndarray
    root: Path | None = None

    def all_views(self) -> list[View]:
        return self.train + self.test

    def to_unit(self, pose: np.ndarray) -> np.ndarray:
        """Map a world camera-to-world matrix into unit-cube coordinates."""
        out = np.asarray(pose, dtype=np.float64).copy()
        out[:3, 3] = (out[:3, 3] - self.offset) / self.scale
        return out


def load_dataset(path) -> Dataset:
    """Read the manifest and images; views come back in unit-cube coordinates."""
    root = Path(path)
    manifest = read_manifest(root)
    root = root if root.is_dir() else root.parent
    scale = float(np.max(manifest.box_max - manifest.box_min))
    offset = manifest.box_min.copy()
    near, far = manifest.near / scale, manifest.far / scale

    def make_view(name: str) -> View:
        frame = manifest.frame(name)
        img_path = root / frame.file_path
        if not img_path.exists():
            raise FileNotFoundError(f"frame {name!r}: image {img_path} not found")
        img = read_image(img_path)
        if img.shape[:2] != (manifest.height, manifest.width):
            raise ValueError(f"frame {name!r}: image {img_path} is {img.shape[1]}x{img.shape[0]}, "
                             f"manifest declares {manifest.width}x{manifest.height}")
        pose = frame.pose.copy()
        pose[:3, 3] = (pose[:3, 3] - offset) / scale
        cam = Camera(manifest.K, pose, manifest.width, manifest.height)
        return View(cam, img, near, far, name)

    train = [make_view(n) for n in manifest.train]
    test = [make_view(n) for n in manifest.test]
    hi = (manifest.box_max - offset) / scale
    for view in train:
        _check_frustum(view, hi)
    return Dataset(manifest, train, test, scale, offset, root)


def _check_frustum(view: View, hi: np.ndarray) -> None:
    cam = view.camera
    rows = np.linspace(0, cam.height - 1, 5)
    cols = np.linspace(0, cam.width - 1, 5)
    px = np.array([(r, c) for r in rows for c in cols])
    rays = generate_rays(cam, px, view.near, view.far)
    enter, leave = box_interval(rays.origins, rays.directions, np.zeros(3), hi)
    hit = (np.maximum(enter, view.near) < np.minimum(leave, view.far))
    if not hit.any():
        raise ValueError(f"frame {view.name!r}: view frustum does not intersect the scene box")


# -------------------------------------------------------------- synthetic
@dataclass
class Primitive:
    kind: str            # "box" or "sphere"
    center: tuple
    size: tuple          # box: full extents; sphere: (radius,)
    albedo: tuple

    def __post_init__(self):
        if self.kind not in ("box", "sphere"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        c = np.asarray(self.center, dtype=np.float64)
        half = np.asarray(self.size, dtype=np.float64) / 2.0 if self.kind == "box" \
            else np.full(3, float(self.size[0]))
        if np.any(c - half < -1e-12) or np.any(c + half > 1 + 1e-12):
            raise ValueError(f"{self.kind} at {tuple(c)} extends outside the unit cube")

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the first surface hit (0 when starting inside), inf on a miss."""
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "box":
            half = np.asarray(self.size, dtype=np.float64) / 2.0
            t0, t1 = box_interval(origins, dirs, c - half, c + half)
            hit = t1 >= np.maximum(t0, 0.0)
            return np.where(hit, np.maximum(t0, 0.0), np.inf)
        r = float(self.size[0])
        oc = origins - c
        b = np.sum(oc * dirs, axis=1)
        cc = np.sum(oc * oc, axis=1) - r * r
        disc = b * b - cc
        root = np.sqrt(np.maximum(disc, 0.0))
        t_near, t_far = -b - root, -b + root
        t = np.where(t_near >= 0, t_near, np.where(t_far >= 0, 0.0, np.inf))
        return np.where(disc >= 0, t, np.inf)


@dataclass
class SyntheticSceneSpec:
    primitives: list[Primitive]
    seed: int = 0
    sigma_inside: float = 1e3

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("SyntheticSceneSpec: at least one primitive is required")

    def to_json(self) -> dict:
        return {"seed": self.seed, "sigma_inside": self.sigma_inside,
                "primitives": [asdict(p) for p in self.primitives]}

    @classmethod
    def from_json(cls, blob: dict) -> "SyntheticSceneSpec":
        prims = [Primitive(p["kind"], tuple(p["center"]), tuple(p["size"]), tuple(p["albedo"]))
                 for p in blob["primitives"]]
        return cls(prims, int(blob.get("seed", 0)), float(blob.get("sigma_inside", 1e3)))


def default_scene(seed: int = 0) -> SyntheticSceneSpec:
    """Two coloured boxes and a sphere."""
    return SyntheticSceneSpec([
        Primitive("box", (0.32, 0.2, 0.38), (0.3, 0.3, 0.3), (0.85, 0.25, 0.2)),
        Primitive("box", (0.68, 0.3, 0.62), (0.24, 0.5, 0.24), (0.2, 0.35, 0.85)),
        Primitive("sphere", (0.45, 0.6, 0.6), (0.17,), (0.25, 0.8, 0.3)),
    ], seed=seed)


def render_analytic(scene: SyntheticSceneSpec, camera: Camera, pixels=None):
    """Exact ray casting of the primitives: flat albedo on the nearest hit, black background.

    Returns ``(image (H, W, 3), depth (H, W), hit (H, W))`` for the full frame,
    or flat arrays when ``pixels`` is given. Depth is distance along the unit ray.
    """
    full = pixels is None
    if full:
        rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
        pixels = np.stack([rows.ravel(), cols.ravel()], axis=1)
    rays = generate_rays(camera, pixels, 0.0, 1.0)
    best = np.full(len(pixels), np.inf)
    color = np.zeros((len(pixels), 3))
    for prim in scene.primitives:
        t = prim.intersect(rays.origins, rays.directions)
        closer = t < best
        best = np.where(closer, t, best)
        color[closer] = np.asarray(prim.albedo, dtype=np.float64)
    hit = np.isfinite(best)
    depth = np.where(hit, best, 0.0)
    if full:
        H, W = camera.height, camera.width
        return color.reshape(H, W, 3), depth.reshape(H, W), hit.reshape(H, W)
    return color, depth, hit


def look_at(position, target=(0.5, 0.5, 0.5), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    z = -forward
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = x, y, z, position
    return pose


def ring_poses(n: int, radius: float = 1.3, elevation_deg: float = 20.0, arc_deg: float = 90.0,
               jitter_deg: float = 0.0, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Cameras spread evenly over an arc of a ring around the cube centre, all looking at it."""
    if n == 1:
        az = np.array([0.0])
    else:
        az = np.linspace(-arc_deg / 2.0, arc_deg / 2.0, n)
    if jitter_deg and rng is not None:
        az = az + rng.uniform(-jitter_deg, jitter_deg, size=n)
    el = math.radians(elevation_deg)
    poses = []
    for a in np.radians(az):
        pos = np.array([0.5 + radius * math.cos(el) * math.sin(a),
                        0.5 + radius * math.sin(el),
                        0.5 + radius * math.cos(el) * math.cos(a)])
        poses.append(look_at(pos))
    return poses


def generate_synthetic_dataset(spec: SyntheticSceneSpec, n_train: int, n_test: int, side: int = 64,
                               seed: int = 0, out_dir=None, focal_scale: float = 1.5,
                               radius: float = 1.3) -> Dataset:
    """Ring of cameras around the scene; images from exact ray casting, quantised to 8 bits.

    Test cameras sit between training cameras on the arc. With ``out_dir`` the
    dataset is also written to disk (manifest, PNGs and ``scene.json``).
    """
    if n_train < 1:
        raise ValueError("generate_synthetic_dataset: need at least one training view")
    if n_test < 0:
        raise ValueError("generate_synthetic_dataset: n_test must be >= 0")
    rng = np.random.default_rng(seed)
    total = n_train + n_test
    poses = ring_poses(total, radius=radius, jitter_deg=2.0, rng=rng)
    test_idx = set(range(1, total, 2)[:n_test]) if n_test <= total // 2 else set(range(n_train, total))
    focal = focal_scale * side
    cx = cy = (side - 1) / 2.0
    K = intrinsics(focal, cx, cy)
    frames, train_names, test_names, views = [], [], [], {}
    near, far = 0.3, radius + 1.0
    for i, pose in enumerate(poses):
        name = f"r_{i:03d}"
        cam = Camera(K, pose, side, side)
        img, _, _ = render_analytic(spec, cam)
        img = to_uint8(img) / 255.0
        frames.append(Frame(name, f"images/{name}.png", pose))
        (test_names if i in test_idx else train_names).append(name)
        views[name] = View(cam, img, near, far, name)
    manifest = DatasetManifest(focal, focal, cx, cy, side, side, np.zeros(3), np.ones(3), near, far,
                               frames, train_names, test_names)
    root = None
    if out_dir is not None:
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        for name, view in views.items():
            write_image(root / manifest.frame(name).file_path, view.image)
        write_manifest(root / MANIFEST, manifest)
        write_text_atomic(root / SCENE_FILE, json.dumps(spec.to_json(), indent=2) + "\n")
    return Dataset(manifest, [views[n] for n in train_names], [views[n] for n in test_names],
                   1.0, np.zeros(3), root)


def load_scene(root) -> SyntheticSceneSpec | None:
    path = Path(root) / SCENE_FILE
    if not path.exists():
        return None
    return SyntheticSceneSpec.from_json(json.loads(path.read_text()))
