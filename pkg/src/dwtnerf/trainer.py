"""Training loop with lazily scheduled wavelet supervision, configs and logging."""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoding import HashGridConfig
from .field import FieldConfig, FieldModel
from .losses import (TERM_ORDER, LossWeights, MatchSet, combined_loss, depth_smoothness_loss,
                     distortion_loss, full_geometry_loss, kl_patch_loss, mse_loss, mv_correspondence_loss)
from .metrics import psnr, ssim
from .optim import Adam, NonFiniteGradientError, save_checkpoint
from .render import Camera, View, generate_rays, render_image, render_rays, sample_patch_batch, sample_random_batch
from .tensor import NonFiniteError
from .warp import interpolate_pose, novel_dw_loss
from .wavelet import dw_loss, get_filter


def dw_scheduled(t: int, interval: int, stop: int) -> bool:
    """True on iterations where the DW loss is evaluated: ``t mod interval == 0`` and ``t < stop``."""
    if t < 0:
        raise ValueError(f"dw_scheduled: iteration must be >= 0, got {t}")
    return t % interval == 0 and t < stop


@dataclass
class TrainConfig:
    iterations: int = 10000
    batch_rays: int = 4096
    patch_side: int = 192
    dw_interval: int = 10
    dw_stop: int = 5000
    n_samples: int = 64
    stratified: bool = True
    lr_hash: float = 1e-2
    lr_net: float = 1e-3
    lr_schedule: str = "constant"   # or "exponential"
    lr_final_ratio: float = 0.1     # exponential: lr at the last iteration relative to the start
    seed: int = 0
    filter: str = "haar"
    levels: int = 1
    use_dw: bool = True
    use_dw_novel: bool = False
    use_mv: bool = False
    use_dist: bool = True
    use_fg: bool = True
    use_ds: bool = True
    use_kl: bool = True
    mv_two_way: bool = True
    mv_min_conf: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    # field network
    hash_levels: int = 16
    hash_features: int = 2
    hash_log2_table: int = 14
    hash_base: int = 16
    hash_max_res: int = 512
    hidden: int = 64
    heads_in: int = 2
    heads_out: int = 2
    token_axis: str = "samples"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.dw_interval < 1:
            raise ValueError("dw_interval must be >= 1")
        if self.iterations > 0 and not 0 < self.dw_stop <= self.iterations:
            raise ValueError(f"dw_stop must satisfy 0 < dw_stop <= iterations, got {self.dw_stop}")
        if self.patch_side < 2 or self.patch_side % 2:
            raise ValueError(f"patch_side must be even and >= 2, got {self.patch_side}")
        if self.batch_rays < 1 or self.n_samples < 1:
            raise ValueError("batch_rays and n_samples must be positive")
        if self.lr_schedule not in ("constant", "exponential"):
            raise ValueError(f"lr_schedule must be 'constant' or 'exponential', got {self.lr_schedule!r}")
        if not (self.lr_hash > 0 and self.lr_net > 0 and self.lr_final_ratio > 0):
            raise ValueError("learning rates must be positive")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        side = self.patch_side
        for _ in range(self.levels):
            if side % 2:
                raise ValueError(f"patch_side {self.patch_side} cannot be decomposed {self.levels} times")
            side //= 2
        get_filter(self.filter)

    def field_config(self) -> FieldConfig:
        growth = (self.hash_max_res / self.hash_base) ** (1.0 / max(self.hash_levels - 1, 1))
        hash_cfg = HashGridConfig(levels=self.hash_levels, features_per_level=self.hash_features,
                                  table_size=2 ** self.hash_log2_table, base_resolution=self.hash_base,
                                  growth_factor=growth)
        return FieldConfig(hash=hash_cfg, hidden=self.hidden, heads_in=self.heads_in, heads_out=self.heads_out,
                           token_axis=self.token_axis)

    def learning_rates(self, t: int, names) -> dict[str, float]:
        scale = 1.0
        if self.lr_schedule == "exponential" and self.iterations > 1:
            scale = self.lr_final_ratio ** (t / (self.iterations - 1))
        return {n: (self.lr_hash if n == "hash_tables" else self.lr_net) * scale for n in names}

    # -------------------------------------------------------------- presets
    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        try:
            base = dict(PRESETS[name])
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        if name == "synthetic" and "weights" not in overrides:
            base["weights"] = LossWeights.synthetic_preset()
        base.update(overrides)
        return cls(**base)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "weights":
                for wf in fields(LossWeights):
                    lines.append(f"w_{wf.name} = {float(getattr(self.weights, wf.name))!r}")
            else:
                lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


PRESETS: dict[str, dict] = {
    # the published LLFF setting
    "llff": {},
    # synthetic benchmark: larger ray batch, sparser DW loss, smaller sub-band weights, one attention head
    "synthetic": dict(batch_rays=7008, dw_interval=150, heads_in=1, heads_out=1),
    # single-core desk scale
    "desk": dict(iterations=2000, batch_rays=128, patch_side=16, dw_interval=10, dw_stop=1000,
                 n_samples=32, hash_levels=8, hash_log2_table=12, hash_max_res=128, hidden=64),
}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(float(value)) if isinstance(value, float) else str(value)


def _coerce(raw: str, kind, key: str):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {key!r}: expected a boolean, got {raw!r}")
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    """Parse ``key = value`` lines with ``#`` comments into a raw string mapping."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def build_config(raw: dict[str, str], preset: str | None = None) -> TrainConfig:
    """Turn raw key/value strings (file entries, then CLI overrides) into a validated config."""
    raw = dict(raw)
    preset = raw.pop("preset", preset) or "desk"
    field_types = {f.name: f.type for f in fields(TrainConfig)}
    weight_types = {f"w_{f.name}": f.type for f in fields(LossWeights)}
    cfg = TrainConfig.preset(preset)
    values = {}
    weight_values = {}
    for key, value in raw.items():
        if key in weight_types:
            weight_values[key[2:]] = _coerce(value, weight_types[key], key)
        elif key in field_types and key != "weights":
            values[key] = _coerce(value, field_types[key], key)
        else:
            raise ValueError(f"unknown config key {key!r}")
    weights = dataclasses.replace(cfg.weights, **weight_values)
    return dataclasses.replace(cfg, weights=weights, **values)


def load_config(path, overrides: dict[str, str] | None = None, preset: str | None = None) -> TrainConfig:
    raw = parse_config_text(Path(path).read_text(), str(path)) if path else {}
    raw.update(overrides or {})
    return build_config(raw, preset)


# ------------------------------------------------------------------- logging
LOG_COLUMNS = ("iteration", "total") + TERM_ORDER + ("dw_active", "wall_time")


@dataclass
class TrainLog:
    """Per-iteration records; term values are unweighted except DW and MV, which carry their own weights."""

    records: list[dict] = field(default_factory=list)
    path: Path | None = None

    def __post_init__(self):
        self._fh = None
        if self.path is not None:
            self.path = Path(self.path)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(LOG_COLUMNS)

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            row = []
            for col in LOG_COLUMNS:
                v = record.get(col)
                row.append("" if v is None else (int(v) if col == "dw_active" else repr(float(v)) if isinstance(v, float) else v))
            self._writer.writerow(row)
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r.get(name) is None else r[name] for r in self.records], dtype=np.float64)

    @property
    def dw_count(self) -> int:
        return sum(1 for r in self.records if r["dw_active"])


def read_log(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                if v == "":
                    rec[k] = None
                elif k in ("iteration", "dw_active"):
                    rec[k] = int(v)
                else:
                    rec[k] = float(v)
            rows.append(rec)
    return rows


def resum(record: dict, weights: LossWeights) -> float:
    """Recompute an iteration's total from its recorded terms."""
    total = 0.0
    for name in TERM_ORDER:
        v = record.get(name)
        if v is None:
            continue
        total += v * getattr(weights, name) if name in ("dist", "fg", "ds", "kl") else v
    return total


# ------------------------------------------------------------------ training
class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, term: str, cause: Exception):
        super().__init__(f"training aborted at iteration {iteration}: term {term!r} is not finite ({cause})")
        self.iteration = iteration
        self.term = term


@contextmanager
def _term(name: str, t: int):
    try:
        yield
    except (NonFiniteError, NonFiniteGradientError, FloatingPointError) as exc:
        raise TrainingAborted(t, name, exc) from exc


def _views_of(dataset) -> list[View]:
    views = list(getattr(dataset, "train", dataset))
    if not views:
        raise ValueError("train: dataset has no training views")
    return views


def train(dataset, config: TrainConfig, log_path=None, checkpoint_path=None,
          matches: Sequence[MatchSet] | None = None, model: FieldModel | None = None,
          progress=None) -> tuple[FieldModel, TrainLog]:
    """Optimise a field on the training views.

    Every iteration renders a random ray batch for the photometric loss and,
    when enabled, the distortion and full-geometry regularisers. On DW-scheduled
    iterations a patch is rendered as well and supplies the DW loss, the depth
    smoothness and KL terms and, optionally, the novel-pose DW term. Everything
    is drawn from one seeded generator, so runs are reproducible bit for bit.

    A non-finite term raises :class:`TrainingAborted`; the checkpoint (if any)
    then holds the parameters from the last finite iteration.
    """
    views = _views_of(dataset)
    cfg = config
    model = model or FieldModel(cfg.field_config(), seed=cfg.seed)
    params = model.parameters()
    optim = Adam(params, lr=cfg.learning_rates(0, params))
    rng = np.random.default_rng(cfg.seed + 1)
    log = TrainLog(path=log_path)
    w = cfg.weights
    sub = w.subbands
    if cfg.use_mv and not matches:
        raise ValueError("train: use_mv requires a match set")
    cameras = [v.camera for v in views]
    start = time.perf_counter()
    try:
        for t in range(cfg.iterations):
            active = cfg.use_dw and dw_scheduled(t, cfg.dw_interval, cfg.dw_stop)
            terms = {}
            try:
                with _term("mse", t):
                    batch, gt = sample_random_batch(views, cfg.batch_rays, rng)
                    out = render_rays(model, batch, cfg.n_samples, cfg.stratified, rng)
                    terms["mse"] = mse_loss(out.color, gt)
                if cfg.use_dist or cfg.use_fg:
                    mids, deltas = out.normalized_samples()
                    if cfg.use_dist:
                        with _term("dist", t):
                            terms["dist"] = distortion_loss(out.weights, mids, deltas)
                    if cfg.use_fg:
                        with _term("fg", t):
                            terms["fg"] = full_geometry_loss(out.weights)
                if active:
                    with _term("dw", t):
                        pbatch, pgt = sample_patch_batch(views, cfg.patch_side, rng)
                        pout = render_rays(model, pbatch, cfg.n_samples, cfg.stratified, rng)
                        side = cfg.patch_side
                        terms["dw"] = dw_loss(pout.color.reshape(side, side, 3), pgt, sub, cfg.filter, cfg.levels)
                    if cfg.use_ds:
                        with _term("ds", t):
                            terms["ds"] = depth_smoothness_loss(pout.depth, side)
                    if cfg.use_kl:
                        with _term("kl", t):
                            terms["kl"] = kl_patch_loss(pout.weights, side)
                    if cfg.use_dw_novel and len(views) > 1:
                        with _term("dw_novel", t):
                            terms["dw_novel"] = _novel_term(model, views, pbatch, cfg, rng, sub)
                if cfg.use_mv and t % cfg.dw_interval == 0:
                    with _term("mv", t):
                        ms = matches[int(rng.integers(len(matches)))]
                        terms["mv"] = mv_correspondence_loss(
                            ms, _depth_fn(model, views, cfg), cameras, w.mv, cfg.mv_two_way, cfg.mv_min_conf)
                with _term("total", t):
                    total = combined_loss(terms, w)
                    optim.zero_grad()
                    total.backward()
                    optim.lr = cfg.learning_rates(t, params)
                    optim.step()
            except TrainingAborted:
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model.parameters())
                raise
            record = {"iteration": t, "total": float(total.data), "dw_active": active,
                      "wall_time": time.perf_counter() - start}
            record.update({k: float(v.data) for k, v in terms.items()})
            log.append(record)
            if progress is not None:
                progress(t, record)
    finally:
        log.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model.parameters())
    return model, log


def _novel_term(model, views, pbatch, cfg: TrainConfig, rng, sub):
    """Render the same patch at a pose blended between the patch view and another view."""
    layout = pbatch.layout
    known = views[layout.view]
    others = [i for i in range(len(views)) if i != layout.view]
    other = views[others[int(rng.integers(len(others)))]]
    alpha = float(rng.random())
    pose = interpolate_pose(other.camera.pose, known.camera.pose, alpha)
    cam = Camera(known.camera.K, pose, known.camera.width, known.camera.height)
    side = layout.side
    rows, cols = np.meshgrid(np.arange(layout.top, layout.top + side),
                             np.arange(layout.left, layout.left + side), indexing="ij")
    rays = generate_rays(cam, np.stack([rows.ravel(), cols.ravel()], axis=1), known.near, known.far)
    out = render_rays(model, rays, cfg.n_samples, cfg.stratified, rng)
    loss, _ = novel_dw_loss(out.color.reshape(side, side, 3), out.depth, layout.top, layout.left,
                            known.image, cam, known.camera, cfg.filter, sub, cfg.levels)
    return loss


def _depth_fn(model, views, cfg: TrainConfig):
    def depth(view_index: int, pixels_uv: np.ndarray):
        view = views[view_index]
        px = np.asarray(pixels_uv, dtype=np.float64)[:, ::-1]  # (u, v) -> (row, col)
        rays = generate_rays(view.camera, px, view.near, view.far)
        return render_rays(model, rays, cfg.n_samples).depth
    return depth


# ---------------------------------------------------------------- evaluation
@dataclass
class EvalResult:
    names: list[str]
    psnr: list[float]
    ssim: list[float]
    renders: list[np.ndarray]
    depths: list[np.ndarray]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    def rows(self):
        yield from zip(self.names, self.psnr, self.ssim)


def evaluate(model: FieldModel, views: Sequence[View], n_samples: int = 64, chunk: int = 1024) -> EvalResult:
    """Render every view in full and score it against its image.

    Under the default per-ray token sets the result does not depend on
    ``chunk``. With ``token_axis = "rays"`` attention mixes the rays of one
    render call, so ``chunk`` should then match the training batch size.
    """
    res = EvalResult([], [], [], [], [])
    for i, view in enumerate(views):
        rgb, depth = render_image(model, view.camera, view.near, view.far, n_samples, chunk)
        rgb = np.clip(rgb, 0.0, 1.0)
        res.names.append(view.name or f"view_{i}")
        res.psnr.append(psnr(rgb, view.image))
        res.ssim.append(ssim(rgb, view.image))
        res.renders.append(rgb)
        res.depths.append(depth)
    return res


def views_mse(model: FieldModel, views: Sequence[View], n_samples: int, chunk: int = 1024) -> float:
    """Mean squared error of full deterministic renders over the given views."""
    errs = []
    for view in views:
        rgb, _ = render_image(model, view.camera, view.near, view.far, n_samples, chunk)
        errs.append(np.mean((rgb - view.image) ** 2))
    return float(np.mean(errs))
