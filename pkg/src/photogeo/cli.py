"""Command-line interface.

Subcommands: train, eval, decompose, render, gen-synth, gradcheck.
Configuration comes from a key=value file plus --set overrides; --seed and
--deterministic are honored everywhere. Exit codes: 0 success, 1 usage
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import apply_overrides, config_to_text, load_config_file
from .gradsuite import run_gradient_suite
from .metrics import MetricReport
from .pipeline import (TrainConfig, build_dataset, evaluate, load_run,
                       reconstruct, render_views, save_run, train)
from .synthdata import SynthConfig, generate_dataset, save_scene_archive

__all__ = ["cli_main", "main"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _save_png(path, arr: np.ndarray) -> None:
    q = np.clip(np.round(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    if q.ndim == 2:
        Image.fromarray(q, mode="L").save(path)
    else:
        Image.fromarray(q, mode="RGB").save(path)


def _load_image(path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        side = min(im.size)
        left, top = (im.width - side) // 2, (im.height - side) // 2
        im = im.crop((left, top, left + side, top + side))
        im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def _build_parser() -> _Parser:
    parser = _Parser(prog="photogeo",
                     description="Photo-geometric autoencoding engine")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("train", parents=[common],
                       help="train on a dataset spec or folder")
    p.add_argument("--config", type=str, default=None,
                   help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--iters", type=int, default=None)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint against ground truth")
    p.add_argument("--run", type=str, required=True,
                   help="run directory (checkpoint.ckpt + config.cfg)")
    p.add_argument("--data", type=str, default=None,
                   help="dataset spec with ground truth (default: held-out synth)")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--out", type=str, default=None)

    p = sub.add_parser("decompose", parents=[common],
                       help="decompose one image into its factors")
    p.add_argument("--run", type=str, required=True)
    p.add_argument("--image", type=str, required=True)
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("render", parents=[common],
                       help="re-render an image from novel views/lights")
    p.add_argument("--run", type=str, required=True)
    p.add_argument("--image", type=str, required=True)
    p.add_argument("--view", dest="views", action="append", default=[],
                   metavar="YAW,PITCH", help="degrees; repeatable")
    p.add_argument("--light", dest="lights", action="append", default=None,
                   metavar="AX,AY", help="degrees; repeatable")
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("gen-synth", parents=[common],
                       help="generate a synthetic scene archive")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--size", type=int, default=32)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference checks for all primitives")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--probes", type=int, default=20)
    return parser


def _resolve_train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        cfg = load_config_file(cfg, args.config)
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    updates = {}
    if args.data is not None:
        updates["data"] = args.data
    if args.out is not None:
        updates["out"] = args.out
    if args.iters is not None:
        updates["iterations"] = args.iters
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.deterministic:
        updates["deterministic"] = True
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    result = train(cfg, log_fn=lambda r: print(r.as_line(), flush=True))
    save_run(cfg.out, result)
    print(f"saved run to {cfg.out}")
    return 0


def _cmd_eval(args) -> int:
    params, buffers, cfg = load_run(args.run)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.data is not None:
        cfg = dataclasses.replace(cfg, data=args.data)
        _, scenes = build_dataset(cfg)
    else:
        from .study import make_test_scenes
        scenes = make_test_scenes(cfg, args.count)
    if scenes is None:
        raise ValueError("evaluation dataset carries no ground truth")
    report = evaluate(params, buffers, cfg, scenes)
    out_dir = Path(args.out or args.run)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save(out_dir / "metrics.txt", out_dir / "metrics.csv")
    print(report.to_text(), end="")
    print(f"wrote {out_dir / 'metrics.txt'} and metrics.csv")
    return 0


def _cmd_decompose(args) -> int:
    params, buffers, cfg = load_run(args.run)
    image = _load_image(args.image, cfg.image_size)
    dec, rep = reconstruct(params, buffers, cfg, image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_png(out / "input.png", image)
    _save_png(out / "reconstruction.png", rep.image.data[0])
    _save_png(out / "albedo.png", dec.a.data[0])
    lo, hi = cfg.net_config().depth_range
    _save_png(out / "depth.png", (dec.d.data[0] - lo) / (hi - lo))
    w = dec.w.data[0]
    light = dec.light
    lines = [
        "pose=" + ",".join(f"{v:.8g}" for v in w),
        "light_ax=%.8g" % dec.light_angles.data[0, 0],
        "light_ay=%.8g" % dec.light_angles.data[0, 1],
        "ks=%.8g" % float(light.ks.data[0]),
        "kd=%.8g" % float(light.kd.data[0]),
    ]
    (out / "factors.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote decomposition to {out}")
    return 0


def _parse_pair(text: str, flag: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise UsageError(f"{flag} expects two comma-separated numbers, got {text!r}")
    return float(parts[0]), float(parts[1])


def _cmd_render(args) -> int:
    params, buffers, cfg = load_run(args.run)
    image = _load_image(args.image, cfg.image_size)
    views = [_parse_pair(v, "--view") for v in args.views] or [(0.0, 0.0)]
    lights = None
    if args.lights:
        lights = [_parse_pair(v, "--light") for v in args.lights]
        if len(lights) == 1:
            lights = lights * len(views)
        if len(lights) != len(views):
            raise UsageError("--light count must be 1 or match --view count")
    results = render_views(params, buffers, cfg, image, views, lights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, ((yaw, pitch), (img, degenerate)) in enumerate(zip(views, results)):
        name = f"view_{i:03d}_yaw{yaw:+.0f}_pitch{pitch:+.0f}.png"
        _save_png(out / name, np.clip(img, 0.0, 1.0))
        if degenerate:
            print(f"warning: {name} has zero warp coverage")
    print(f"wrote {len(results)} views to {out}")
    return 0


def _cmd_gen_synth(args) -> int:
    seed = args.seed if args.seed is not None else 0
    cfg = SynthConfig(image_size=args.size)
    dataset = generate_dataset(args.count, cfg, base_seed=seed)
    save_scene_archive(dataset, args.out, cfg)
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    entries = run_gradient_suite(size=args.size, probes=args.probes,
                                 seed=args.seed if args.seed is not None else 0)
    width = max(len(e.name) for e in entries)
    all_ok = True
    for e in entries:
        status = "PASS" if e.passed else "FAIL"
        print(f"{e.name:<{width}}  tol={e.tol:.0e}  max_rel_err={e.max_rel_err:.3e}  "
              f"probes={e.probes}  {status}")
        all_ok &= e.passed
    print("gradient suite:", "PASS" if all_ok else "FAIL")
    return 0 if all_ok else 2


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "decompose": _cmd_decompose,
    "render": _cmd_render,
    "gen-synth": _cmd_gen_synth,
    "gradcheck": _cmd_gradcheck,
}


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        parser.print_help(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure contract: exit code 2
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())
