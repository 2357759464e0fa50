"""Command-line entry point: ``splat4d <command> ...``.

Exit codes: 0 success, 1 invalid data or failed check, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .camera import read_cameras, write_cameras
from .exceptions import Splat4DError
from .harness import (
    SETUP_KINDS,
    CameraSetupSpec,
    evaluate,
    make_camera_setup,
    make_synthetic_scene,
    read_scene,
    reference_name,
    write_scene,
)
from .rasterizer import RenderOptions, render_tiled, write_png, write_raw


def _background(text):
    try:
        rgb = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"background must be r,g,b floats, got {text!r}") from None
    if len(rgb) != 3:
        raise argparse.ArgumentTypeError("background needs exactly three components")
    return rgb


def _times(text):
    try:
        start, end, n = text.split(":")
        n = int(n)
        start, end = float(start), float(end)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--times expects start:end:n, got {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("--times needs n >= 1")
    return list(np.linspace(start, end, n)) if n > 1 else [start]


def _write_image(path, image):
    path = Path(path)
    if path.suffix.lower() in (".raw", ".f32"):
        write_raw(path, image)
    else:
        write_png(path, image)


def cmd_render(args):
    scene = read_scene(args.scene)
    views = read_cameras(args.cameras)
    opts = RenderOptions(mode=args.mode, background=args.background, tile_size=args.tile_size)
    if args.time is not None:
        times = [args.time]
    elif args.times is not None:
        times = args.times
    else:
        times = None
    jobs = []
    for i, view in enumerate(views):
        if times is None:
            jobs.append((i, None, view))
        else:
            jobs += [(i, k, view.at_time(t)) for k, t in enumerate(times)]
    if times is None:
        distinct = sorted({v.time for v in views})
        jobs = [(i, distinct.index(v.time), v) for i, _, v in jobs]
    if len(jobs) == 1:
        _write_image(args.out, render_tiled(scene, jobs[0][2], opts=opts))
        print(f"wrote {args.out}")
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, k, view in jobs:
        _write_image(out / reference_name(i, k), render_tiled(scene, view, opts=opts))
    print(f"wrote {len(jobs)} images to {out}")
    return 0


def cmd_fit(args):
    from .datasets import load_target_set
    from .optimizer import fit_scene

    targets = load_target_set(args.targets, args.cameras)
    result = fit_scene(targets, args.n, args.iters, args.seed, lr=args.lr, lam=args.lam, batch_size=args.batch)
    write_scene(args.out, result.scene)
    if args.trace:
        result.trace.write_csv(args.trace)
    final = result.trace.rows[-1]
    print(f"wrote {args.out}: {len(result.scene)} gaussians, loss {final[1]:.6f}, train psnr {final[4]:.2f} dB")
    return 0


def cmd_train_toy(args):
    from .datasets import load_dataset
    from .optimizer import train_toy
    from .transformer import ModelConfig, write_checkpoint

    settings = json.loads(Path(args.config).read_text()) if args.config else {}
    names = {f.name for f in fields(ModelConfig)}
    unknown = set(settings) - names - {"lr", "lambda"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = ModelConfig(**{k: v for k, v in settings.items() if k in names})
    dataset = load_dataset(args.data)
    result = train_toy(
        dataset, cfg, args.iters, args.seed,
        lr=settings.get("lr", 4e-4), lam=settings.get("lambda", 0.5), eval_every=args.eval_every,
    )
    write_checkpoint(args.out, cfg, result.weights)
    if args.trace:
        result.trace.write_csv(args.trace)
    print(f"wrote {args.out}: final loss {result.trace.rows[-1][1]:.6f}")
    return 0


def cmd_eval(args):
    scene = read_scene(args.scene)
    views = read_cameras(args.setup)
    ref = Path(args.ref)
    reference = read_scene(ref) if ref.is_file() else ref
    report = evaluate(scene, views, reference)
    if args.report:
        report.write_json(args.report)
    print(f"mean psnr {report.mean_psnr:.4f} dB, mean ssim {report.mean_ssim:.6f} over {len(report.entries)} views")
    return 0


def cmd_make_scene(args):
    scene = make_synthetic_scene(args.seed, args.moving, args.static)
    write_scene(args.out, scene)
    print(f"wrote {args.out}: {len(scene)} gaussians")
    return 0


def cmd_make_setup(args):
    spec = CameraSetupSpec(
        args.kind, args.frames, radius=args.radius, elevation=args.elevation, seed=args.seed, resolution=args.resolution
    )
    views = make_camera_setup(spec)
    write_cameras(args.out, views)
    print(f"wrote {args.out}: {len(views)} views, {len({v.time for v in views})} timestamps")
    return 0


def cmd_make_episode(args):
    from .datasets import make_episode, save_episode

    save_episode(args.out, make_episode(args.seed, args.resolution))
    print(f"wrote episode to {args.out}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import MODULES

    check, tol = MODULES[args.module]
    result = check(args.seed)
    status = "PASS" if result.passed(tol) else "FAIL"
    print(f"{args.module}: max rel err {result.max_rel_err:.3e} (tol {tol:g}, {result.n_checked} checked) {status}")
    return 0 if result.passed(tol) else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="splat4d", description="4D Gaussian splatting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a scene file at camera views")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--time", type=float)
    group.add_argument("--times", type=_times, help="start:end:n")
    p.add_argument("--out", required=True, help="image path for one render, directory otherwise")
    p.add_argument("--background", type=_background, default=(1.0, 1.0, 1.0))
    p.add_argument("--mode", choices=("training", "inference"), default="inference")
    p.add_argument("--tile-size", type=int, default=16)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fit", help="fit a scene to posed images")
    p.add_argument("--targets", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--batch", type=int, default=16)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train-toy", help="train the toy regressor")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.add_argument("--eval-every", type=int, default=0)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval", help="score a scene against references")
    p.add_argument("--scene", required=True)
    p.add_argument("--ref", required=True, help="reference scene file or image directory")
    p.add_argument("--setup", required=True, help="camera file of evaluation views")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-scene", help="write a synthetic ground-truth scene")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--moving", type=int, default=24)
    p.add_argument("--static", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_scene)

    p = sub.add_parser("make-setup", help="write an input-camera layout")
    p.add_argument("--kind", choices=SETUP_KINDS, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=float, default=2.7)
    p.add_argument("--elevation", type=float, default=0.0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_setup)

    p = sub.add_parser("make-episode", help="write a synthetic training episode")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=32)
    p.set_defaults(func=cmd_make_episode)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("--module", choices=("rasterizer", "head", "transformer", "ssim"), required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _join_signed_values(argv):
    # argparse would read "--times -1:1:3" as two flags
    out = []
    it = iter(argv)
    for arg in it:
        if arg in ("--time", "--times"):
            value = next(it, None)
            out.append(arg if value is None else f"{arg}={value}")
        else:
            out.append(arg)
    return out


def main(argv=None):
    parser = build_parser()
    argv = _join_signed_values(sys.argv[1:] if argv is None else list(argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (Splat4DError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
