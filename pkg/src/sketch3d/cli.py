"""Command-line interface: init, optimize, render, export-svg, eval.

Exit codes: 0 success, 1 usage, 2 I/O or data error, 3 numerical abort.
A TOML file passed via --config overrides any flag of the subcommand.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .contour import ContourConfig
from .dataset import load_dataset
from .geometry import Camera, look_at_camera
from .losses import DistanceTransformBackend, LossConfig, pixel_l2
from .optim import NumericalAbort, OptimizeConfig, init_strokes, make_backend, optimize, render_strokes_view
from .raster2d import ImageBuffer, default_stroke_width
from .scene import StrokeSet, scene_bounds
from .strokefile import load_strokes, save_strokes
from .svg import export_svg

LOSS_NAMES = {"l2": "pixel-l2", "dt": "distance-transform", "sidecar": "sidecar-perceptual"}
INIT_NAMES = {"random": "random-bbox", "fps": "fps-points", "lines": "line-segments"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="sketch3d", description="Optimize and render 3D sketch strokes.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="TOML file overriding any flag")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("init", help="initialize a stroke file from a dataset")
    common(sp)
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--points", type=Path)
    sp.add_argument("--segments", type=Path)
    sp.add_argument("--n-ind", type=int, default=32)
    sp.add_argument("--n-dep", type=int, default=4)
    sp.add_argument("--init", choices=sorted(INIT_NAMES), default="fps")
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("optimize", help="optimize strokes against a dataset")
    common(sp)
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--points", type=Path)
    sp.add_argument("--segments", type=Path)
    sp.add_argument("--init-file", type=Path, help="initial stroke file (else init flags apply)")
    sp.add_argument("--n-ind", type=int, default=32)
    sp.add_argument("--n-dep", type=int, default=4)
    sp.add_argument("--init", choices=sorted(INIT_NAMES), default="random")
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--stage-split", type=float, default=0.4)
    sp.add_argument("--view-batch", type=int, default=4)
    sp.add_argument("--loss", choices=sorted(LOSS_NAMES), default="l2")
    sp.add_argument("--sidecar-addr", default="127.0.0.1:7301")
    sp.add_argument("--lambda", dest="lambda_weight", type=float, default=1.0)
    sp.add_argument("--no-robust", action="store_true")
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--beta", type=int, default=2)
    sp.add_argument("--n-samples", type=int, default=192)
    sp.add_argument("--width-px", type=float)
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--loss-log", type=Path)

    sp = sub.add_parser("render", help="render PNGs from a stroke file")
    common(sp)
    sp.add_argument("--strokes", type=Path, required=True)
    sp.add_argument("--dataset", type=Path, help="camera source for --frame")
    sp.add_argument("--frame", type=int, help="frame index into the dataset cameras")
    sp.add_argument("--turntable", type=int, help="render N views around the scene")
    sp.add_argument("--azimuth", type=float, help="explicit look-at camera (degrees)")
    sp.add_argument("--elevation", type=float, default=30.0)
    sp.add_argument("--radius", type=float, help="camera distance (default 2x bbox diagonal)")
    sp.add_argument("--res", type=int, default=400)
    sp.add_argument("--beta", type=int, default=2)
    sp.add_argument("--n-samples", type=int, default=192)
    sp.add_argument("--width-px", type=float)
    sp.add_argument("--out-dir", type=Path, required=True)

    sp = sub.add_parser("export-svg", help="export a view as vector graphics")
    common(sp)
    sp.add_argument("--strokes", type=Path, required=True)
    sp.add_argument("--dataset", type=Path)
    sp.add_argument("--frame", type=int)
    sp.add_argument("--azimuth", type=float)
    sp.add_argument("--elevation", type=float, default=30.0)
    sp.add_argument("--radius", type=float)
    sp.add_argument("--res", type=int, default=400)
    sp.add_argument("--n-samples", type=int, default=192)
    sp.add_argument("--width-px", type=float)
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("eval", help="report per-view losses for a stroke file")
    common(sp)
    sp.add_argument("--strokes", type=Path, required=True)
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--n-samples", type=int, default=192)
    sp.add_argument("--width-px", type=float)
    return p


def _apply_config(args: argparse.Namespace) -> None:
    if getattr(args, "config", None) is None:
        return
    try:
        import tomllib  # py >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    data = tomllib.loads(Path(args.config).read_text())
    for key, val in data.items():
        dest = key.replace("-", "_")
        if dest == "lambda":
            dest = "lambda_weight"
        if not hasattr(args, dest):
            raise _UsageError(f"config key {key!r} does not match any flag")
        if dest in ("out", "out_dir", "dataset", "points", "segments", "init_file", "strokes", "loss_log"):
            val = Path(val)
        setattr(args, dest, val)


def _write_png(img: ImageBuffer, path: Path) -> None:
    arr = (np.clip(img.data, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def _turntable_cameras(strokes: StrokeSet, n: int, elevation_deg: float, res: int, radius: float | None):
    lo, hi = scene_bounds(strokes)
    center = 0.5 * (lo + hi)
    diag = float(np.linalg.norm(hi - lo))
    r = radius if radius is not None else 2.0 * diag
    el = np.deg2rad(elevation_deg)
    cams = []
    for k in range(n):
        az = 2.0 * np.pi * k / n
        eye = center + r * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        cams.append(look_at_camera(eye, center, focal=1.5 * res, width=res, height=res))
    return cams


def _camera_from_args(args, strokes: StrokeSet) -> Camera:
    if args.frame is not None:
        if args.dataset is None:
            raise _UsageError("--frame requires --dataset")
        ds = load_dataset(args.dataset)
        if not 0 <= args.frame < len(ds.views):
            raise ValueError(f"frame {args.frame} out of range (0..{len(ds.views) - 1})")
        return ds.views[args.frame][1]
    az = args.azimuth if args.azimuth is not None else 0.0
    lo, hi = scene_bounds(strokes)
    center = 0.5 * (lo + hi)
    diag = float(np.linalg.norm(hi - lo))
    r = args.radius if args.radius is not None else 2.0 * diag
    el = np.deg2rad(args.elevation)
    a = np.deg2rad(az)
    eye = center + r * np.array([np.cos(a) * np.cos(el), np.sin(a) * np.cos(el), np.sin(el)])
    return look_at_camera(eye, center, focal=1.5 * args.res, width=args.res, height=args.res)


def _cmd_init(args) -> int:
    ds = load_dataset(args.dataset, args.points, args.segments)
    strokes = init_strokes(ds, args.n_ind, args.n_dep, INIT_NAMES[args.init], args.seed)
    save_strokes(strokes, args.out)
    print(f"wrote {args.out} ({strokes.n_ind} curves, {strokes.n_dep} quadrics)")
    return 0


def _cmd_optimize(args) -> int:
    ds = load_dataset(args.dataset, args.points, args.segments)
    if args.init_file:
        strokes = load_strokes(args.init_file)
    else:
        strokes = init_strokes(ds, args.n_ind, args.n_dep, INIT_NAMES[args.init], args.seed)
    loss_cfg = LossConfig(
        lambda_weight=args.lambda_weight,
        backend=LOSS_NAMES[args.loss],
        apply_robust=False if args.no_robust else None,
    )
    contour_cfg = ContourConfig(beta=args.beta, n_samples=args.n_samples)
    checkpoints: list[Path] = []

    def on_checkpoint(step: int, s: StrokeSet) -> None:
        path = args.out.with_suffix(f".step{step + 1:05d}{args.out.suffix or '.3dl'}")
        save_strokes(s, path)
        checkpoints.append(path)

    cfg = OptimizeConfig(
        steps=args.steps,
        stage_split=args.stage_split,
        view_batch=args.view_batch,
        lr=args.lr,
        seed=args.seed,
        loss=loss_cfg,
        contour=contour_cfg,
        stroke_width=args.width_px,
        checkpoint_every=args.checkpoint_every,
        on_checkpoint=on_checkpoint if args.checkpoint_every else None,
    )
    backend = make_backend(loss_cfg, args.sidecar_addr)
    if hasattr(backend, "rgb_targets"):
        for (gray, _), rgb in zip(ds.views, ds.rgb):
            backend.rgb_targets[id(gray.data)] = rgb
    final, history = optimize(ds, strokes, cfg, backend)
    save_strokes(final, args.out)
    if args.loss_log:
        lines = [f"{step},{stage},{loss!r}" for step, stage, loss in history]
        args.loss_log.write_text("\n".join(lines) + "\n")
    print(f"final loss {history[-1][2]:.6g}; wrote {args.out}")
    return 0


def _cmd_render(args) -> int:
    strokes = load_strokes(args.strokes)
    contour_cfg = ContourConfig(beta=args.beta, n_samples=args.n_samples)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    if args.turntable:
        cams = _turntable_cameras(strokes, args.turntable, args.elevation, args.res, args.radius)
    else:
        cams = [_camera_from_args(args, strokes)]
    for k, cam in enumerate(cams):
        _, _, comp = render_strokes_view(strokes, cam, contour_cfg, args.width_px)
        path = args.out_dir / f"view_{k:03d}.png"
        _write_png(comp, path)
        print(f"wrote {path}")
    return 0


def _cmd_export_svg(args) -> int:
    strokes = load_strokes(args.strokes)
    cam = _camera_from_args(args, strokes)
    width = args.width_px if args.width_px is not None else default_stroke_width(cam.width)
    n = export_svg(strokes, cam, args.out, width, ContourConfig(n_samples=args.n_samples))
    print(f"wrote {args.out} ({n} elements)")
    return 0


def _cmd_eval(args) -> int:
    strokes = load_strokes(args.strokes)
    ds = load_dataset(args.dataset)
    contour_cfg = ContourConfig(n_samples=args.n_samples)
    dt_backend = DistanceTransformBackend()
    l2s, dts = [], []
    print("view,pixel_l2,distance_transform")
    for vi, (target, cam) in enumerate(ds.views):
        _, _, comp = render_strokes_view(strokes, cam, contour_cfg, args.width_px)
        l2, _ = pixel_l2(target, comp)
        dt, _ = dt_backend.structural(target, comp)
        dt_only = (dt - l2) / dt_backend.dt_weight
        l2s.append(l2)
        dts.append(dt_only)
        print(f"{vi},{l2:.6g},{dt_only:.6g}")
    print(f"mean,{np.mean(l2s):.6g},{np.mean(dts):.6g}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config(args)
        handler = {
            "init": _cmd_init,
            "optimize": _cmd_optimize,
            "render": _cmd_render,
            "export-svg": _cmd_export_svg,
            "eval": _cmd_eval,
        }[args.command]
        return handler(args)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)
    except NumericalAbort as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
