"""Command-line entry point: ``dwtnerf <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__

CONFIG_NAME = "config.cfg"
CHECKPOINT_NAME = "model.ckpt"
LOG_NAME = "train_log.csv"


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _write_csv(path: Path, header, rows) -> None:
    from .data import write_text_atomic

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    write_text_atomic(path, buf.getvalue())


def _load_run(args):
    """Model and config from ``--run`` or ``--checkpoint``/``--config``."""
    from .field import FieldModel
    from .optim import load_checkpoint
    from .trainer import load_config

    if not (args.checkpoint or args.run):
        raise ValueError("need --run DIR or --checkpoint FILE")
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.run) / CHECKPOINT_NAME
    cfg_path = Path(args.config) if args.config else (Path(args.run) / CONFIG_NAME if args.run else None)
    if cfg_path is None:
        raise ValueError("need --run DIR or --config FILE to rebuild the model")
    cfg = load_config(cfg_path)
    model = FieldModel(cfg.field_config(), seed=cfg.seed)
    model.load_state(load_checkpoint(ckpt))
    return model, cfg


def _select_views(dataset, which: str):
    if which == "train":
        return dataset.train
    if which == "test":
        return dataset.test
    return dataset.all_views()


# -------------------------------------------------------------- subcommands
def cmd_gen_scene(args) -> int:
    from .data import SyntheticSceneSpec, default_scene, generate_synthetic_dataset

    spec = default_scene(args.seed)
    if args.scene:
        spec = SyntheticSceneSpec.from_json(json.loads(Path(args.scene).read_text()))
    ds = generate_synthetic_dataset(spec, args.n_train, args.n_test, args.side, args.seed, out_dir=args.out)
    print(f"wrote {len(ds.train)} training and {len(ds.test)} test views to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .data import load_dataset, write_text_atomic
    from .losses import read_matches
    from .plotting import plot_training
    from .trainer import build_config, parse_config_text, train

    raw = parse_config_text(Path(args.config).read_text(), args.config) if args.config else {}
    raw.update(_overrides(args.set))
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    if args.iterations is not None:
        raw["iterations"] = str(args.iterations)
        # keep the DW cutoff inside a shortened run unless it was given explicitly
        raw.setdefault("dw_stop", str(max(1, args.iterations // 2)))
    cfg = build_config(raw, preset=args.preset)
    dataset = load_dataset(args.data)
    matches = read_matches(args.matches) if args.matches else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_text_atomic(out / CONFIG_NAME, cfg.to_text())

    def progress(t, rec):
        if args.verbose and (t % 100 == 0 or t == cfg.iterations - 1):
            print(f"iter {t:5d}  total {rec['total']:.6f}  mse {rec['mse']:.6f}", flush=True)

    _, log = train(dataset, cfg, log_path=out / LOG_NAME, checkpoint_path=out / CHECKPOINT_NAME,
                   matches=matches, progress=progress)
    if log.records:
        plot_training(log.records, out / "training.png")
    print(f"trained {cfg.iterations} iterations; checkpoint {out / CHECKPOINT_NAME}")
    return 0


def cmd_render(args) -> int:
    from .data import load_dataset, normalize_for_display, write_image
    from .render import Camera, render_image

    model, cfg = _load_run(args)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    jobs = []
    if args.poses:
        poses = json.loads(Path(args.poses).read_text())
        ref = dataset.all_views()[0]
        for i, p in enumerate(poses):
            cam = Camera(ref.camera.K, dataset.to_unit(np.asarray(p, dtype=np.float64)),
                         ref.camera.width, ref.camera.height)
            jobs.append((f"pose_{i:03d}", cam, ref.near, ref.far))
    else:
        for v in _select_views(dataset, args.views):
            jobs.append((v.name, v.camera, v.near, v.far))
    for name, cam, near, far in jobs:
        rgb, depth = render_image(model, cam, near, far, cfg.n_samples, cfg.batch_rays)
        write_image(out / f"{name}_color.png", np.clip(rgb, 0, 1))
        write_image(out / f"{name}_depth.png", normalize_for_display(depth))
    print(f"rendered {len(jobs)} views to {out}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset, write_image
    from .plotting import plot_metrics, plot_renders
    from .trainer import evaluate

    model, cfg = _load_run(args)
    dataset = load_dataset(args.data)
    views = _select_views(dataset, args.views)
    if not views:
        raise ValueError(f"dataset has no {args.views} views")
    res = evaluate(model, views, cfg.n_samples, cfg.batch_rays)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [(n, f"{p:.6f}", f"{s:.6f}") for n, p, s in res.rows()]
    _write_csv(out / "metrics.csv", ("view", "psnr", "ssim"), rows)
    for name, rgb in zip(res.names, res.renders):
        write_image(out / f"{name}_render.png", rgb)
    plot_metrics(res.names, res.psnr, res.ssim, out / "metrics.png")
    plot_renders([v.image for v in views], res.renders, res.names, out / "renders.png")
    print(f"mean PSNR {res.mean_psnr:.3f} dB, mean SSIM {res.mean_ssim:.4f} over {len(views)} views")
    return 0


def cmd_decompose(args) -> int:
    from .data import normalize_for_display, read_image, write_image
    from .plotting import plot_subbands
    from .wavelet import BANDS, dwt2_multilevel

    img = read_image(args.image)
    h, w = img.shape[:2]
    if h != w:
        if not args.crop:
            raise ValueError(f"{args.image}: image is {w}x{h}; the transform needs a square image (use --crop)")
        side = min(h, w)
        top, left = (h - side) // 2, (w - side) // 2
        img = img[top:top + side, left:left + side]
    pyramid = dwt2_multilevel(img, args.filter, args.levels)
    out = Path(args.out)
    rows = []
    for lvl, bands in enumerate(pyramid, start=1):
        for name in BANDS:
            if name == "LL" and lvl != args.levels:
                continue
            data = bands[name].data
            fname = f"{name}.png" if args.levels == 1 else f"{name}_L{lvl}.png"
            write_image(out / fname, normalize_for_display(data))
            rows.append((name, lvl, fname, f"{data.min():.6f}", f"{data.max():.6f}", f"{np.sum(data ** 2):.6f}"))
    _write_csv(out / "bands.csv", ("band", "level", "file", "min", "max", "energy"), rows)
    plot_subbands(img, pyramid, out / "decomposition.png", f"{args.filter}, {args.levels} level(s)")
    print(f"wrote {len(rows)} sub-band images to {out}")
    return 0


def cmd_warp_demo(args) -> int:
    from .data import load_dataset, load_scene, render_analytic, write_image
    from .plotting import plot_warp
    from .render import Camera, patch_rays, render_rays
    from .tensor import no_grad
    from .warp import interpolate_pose, novel_dw_loss
    from .wavelet import dw_loss

    dataset = load_dataset(args.data)
    views = dataset.train
    if len(views) < 2:
        raise ValueError("warp-demo needs at least two training views")
    known, other = views[args.known], views[args.other]
    pose = interpolate_pose(other.camera.pose, known.camera.pose, args.alpha)
    cam = Camera(known.camera.K, pose, known.camera.width, known.camera.height)
    side = args.side or min(cam.width, cam.height)
    top = args.top if args.top is not None else (cam.height - side) // 2
    left = args.left if args.left is not None else (cam.width - side) // 2
    novel_view = type(known)(cam, np.zeros_like(known.image), known.near, known.far, "novel")
    if args.run or args.checkpoint:
        model, cfg = _load_run(args)
        rays, _ = patch_rays(novel_view, side, top, left)
        with no_grad():
            out = render_rays(model, rays, cfg.n_samples)
        render = np.clip(out.color.data.reshape(side, side, 3), 0, 1)
        depth = out.depth.data
        source = "model"
    else:
        scene = load_scene(dataset.root)
        if scene is None:
            raise ValueError("no scene.json next to the dataset; pass --run to warp with a trained model")
        rows, cols = np.meshgrid(np.arange(top, top + side), np.arange(left, left + side), indexing="ij")
        px = np.stack([rows.ravel(), cols.ravel()], axis=1)
        color, depth, hit = render_analytic(scene, cam, px)
        render = color.reshape(side, side, 3)
        depth = np.where(hit, depth, 0.0)
        source = "analytic"
    loss, res = novel_dw_loss(render, depth, top, left, known.image, cam, known.camera)
    out_dir = Path(args.out)
    warped = res.image.data
    write_image(out_dir / "warped.png", warped)
    write_image(out_dir / "mask.png", res.mask.astype(np.float64))
    write_image(out_dir / "render.png", render)
    plot_warp(known.image, render, warped, res.mask, out_dir / "warp.png")
    full = float(dw_loss(render, warped).data)
    _write_csv(out_dir / "warp.csv", ("depth_source", "alpha", "valid_fraction", "masked_dw_loss", "unmasked_dw_loss"),
               [(source, args.alpha, f"{res.valid_fraction:.6f}", f"{float(loss.data):.8f}", f"{full:.8f}")])
    print(f"valid fraction {res.valid_fraction:.3f}, masked DW loss {float(loss.data):.6g}")
    return 0


def cmd_bench(args) -> int:
    from .bench import KERNELS, run_benchmarks, to_csv
    from .data import write_text_atomic
    from .plotting import plot_bench

    kernels = args.kernel or list(KERNELS)
    for k in kernels:
        if k not in KERNELS:
            raise ValueError(f"unknown kernel {k!r}; choose from {', '.join(KERNELS)}")
    reports = run_benchmarks(kernels, args.sizes, args.seed, args.runs)
    text = to_csv(reports)
    if args.out:
        out = Path(args.out)
        write_text_atomic(out, text)
        plot_bench([r.__dict__ for r in reports], out.with_suffix(".png"))
    sys.stdout.write(text)
    return 0


# ------------------------------------------------------------------ parser
def _add_run_args(p) -> None:
    p.add_argument("--run", help="training output directory (holds model.ckpt and config.cfg)")
    p.add_argument("--checkpoint", help="checkpoint file, overrides --run")
    p.add_argument("--config", help="config file, overrides --run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dwtnerf", description="Wavelet-supervised few-shot radiance fields.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-scene", help="write a synthetic dataset rendered by exact ray casting")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=3)
    p.add_argument("--n-test", type=int, default=2)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scene", help="scene JSON (defaults to two boxes and a sphere)")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="train a field; writes checkpoint, CSV log and loss plot")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=("desk", "llff", "synthetic"), help="base preset (default desk)")
    p.add_argument("--out", default="run")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--matches", help="match file for the correspondence loss")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render colour and depth images")
    p.add_argument("--data", required=True)
    _add_run_args(p)
    p.add_argument("--views", choices=("train", "test", "all"), default="test")
    p.add_argument("--poses", help="JSON list of 4x4 camera-to-world matrices in dataset coordinates")
    p.add_argument("--out", default="renders")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="per-view PSNR/SSIM as CSV plus figures")
    p.add_argument("--data", required=True)
    _add_run_args(p)
    p.add_argument("--views", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decompose", help="write the wavelet sub-bands of an image")
    p.add_argument("image")
    p.add_argument("--filter", default="haar", choices=("haar", "db1", "db2", "db3"))
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--crop", action="store_true", help="centre-crop non-square images")
    p.add_argument("--out", default="subbands")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("warp-demo", help="warp a known view into an interpolated pose")
    p.add_argument("--data", required=True)
    _add_run_args(p)
    p.add_argument("--known", type=int, default=0)
    p.add_argument("--other", type=int, default=1)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--side", type=int)
    p.add_argument("--top", type=int)
    p.add_argument("--left", type=int)
    p.add_argument("--out", default="warp")
    p.set_defaults(func=cmd_warp_demo)

    p = sub.add_parser("bench", help="time the core kernels, CSV on stdout")
    p.add_argument("--kernel", action="append", help="kernel to run (repeatable; default all)")
    p.add_argument("--sizes", type=int, nargs="+")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--out", help="also write the CSV here and a bar chart next to it")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, OSError) as exc:
        print(f"dwtnerf {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
