"""``nerfstyle`` command-line interface.

Subcommands: make-toy-scene, make-toy-styles, train-geometry, train-style,
render, evaluate. Exit codes: 0 success, 2 configuration error, 3 data
error, 4 numeric failure. ``--json`` prints one machine-readable result (or
error) object on stdout.
"""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import RunConfig, load_run_config, save_run_config
from .errors import ConfigError, DataError, DependencyError, NerfStyleError
from .evaluation import (
    compute_warp,
    evaluate_sequence,
    interpolate_path,
    orbit_path,
    warped_difference,
    write_reports,
)
from .scene_io import MultiViewScene, load_image, save_depth_png, save_png, split_style_corpus
from .style_codec import VGG_WEIGHTS_ENV, pretrain_style_vae
from .toy import ToySceneSpec, make_style_corpus, make_toy_scene

PHOTOREAL = "photoreal"


def _seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _emit(args, payload, lines=()):
    if args.json:
        print(json.dumps({"ok": True, **payload}))
    else:
        for line in lines:
            print(line)


def _progress(args):
    if args.json:
        return None
    return lambda row: print(json.dumps(row), flush=True)


# ---------------------------------------------------------------------------
# toy data


def cmd_make_toy_scene(args):
    spec = ToySceneSpec(
        n_views=args.views, width=args.size, height=args.size, seed=args.seed, store_depth=not args.no_depth
    )
    out = make_toy_scene(args.out, spec)
    _emit(args, {"scene": str(out), "spec": asdict(spec)}, [f"wrote toy scene with {spec.n_views} views to {out}"])


def cmd_make_toy_styles(args):
    paths = make_style_corpus(args.out, args.count, args.size, args.seed)
    _emit(args, {"styles": [str(p) for p in paths]}, [f"wrote {len(paths)} style images to {args.out}"])


# ---------------------------------------------------------------------------
# training


def _parse_override(text):
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    try:
        value = json.loads(value)
    except json.JSONDecodeError:
        pass
    return key, value


def _run_config(args, stage):
    if args.config:
        cfg = load_run_config(args.config)
        d = cfg.to_dict()
    else:
        if not args.scene or not args.out:
            raise ConfigError("either --config or both --scene and --out are required")
        d = RunConfig(scene=args.scene, out_dir=args.out).to_dict()
    d["stage"] = stage
    if args.scene:
        d["scene"] = args.scene
    if args.out:
        d["out_dir"] = args.out
    if args.seed is not None:
        d["seed"] = args.seed
    if args.preset:
        d["preset"] = args.preset
    if getattr(args, "styles", None):
        d["styles"] = args.styles
    if getattr(args, "holdout", None) is not None:
        d["holdout"] = [int(i) for i in args.holdout.split(",") if i.strip()]
    if getattr(args, "style_test_count", None) is not None:
        d["style_test_count"] = args.style_test_count
    if getattr(args, "vgg_weights", None):
        d["vgg_weights"] = args.vgg_weights
    overrides = dict(d.get("overrides", {}))
    overrides.update(dict(_parse_override(s) for s in args.set or ()))
    if args.iters is not None:
        overrides[f"stage{stage}_iterations"] = args.iters
    d["overrides"] = overrides
    cfg = RunConfig.from_dict(d)
    if cfg.device != "cpu":
        raise ConfigError(f"device {cfg.device!r} is not supported by this build; use 'cpu'")
    return cfg


def _run_meta(cfg: RunConfig):
    return {"run_config": cfg.to_dict(), "run_config_hash": cfg.hash}


def cmd_train_geometry(args):
    from .trainer import train_geometry

    cfg = _run_config(args, 1)
    _seed_everything(cfg.seed)
    scene = MultiViewScene.from_directory(cfg.scene)
    train_idx = [i for i in range(len(scene)) if i not in set(cfg.holdout)]
    out = Path(cfg.out_dir)
    save_run_config(cfg, out / "run_config_stage1.json")
    _, path = train_geometry(
        scene, cfg.train_config(), out, train_idx, resume=not args.restart, progress=_progress(args),
        metadata={**_run_meta(cfg), "holdout": list(cfg.holdout)},
    )
    _emit(args, {"checkpoint": str(path), "config_hash": cfg.hash}, [f"stage-1 checkpoint: {path}"])


def cmd_train_style(args):
    from .estimators import make_extractor
    from .trainer import STAGE1_FILE, load_stage1, train_style

    cfg = _run_config(args, 2)
    if not cfg.styles:
        raise ConfigError("stage 2 needs a style corpus (--styles)")
    _seed_everything(cfg.seed)
    out = Path(cfg.out_dir)
    stage1 = out / STAGE1_FILE
    if not stage1.exists():
        raise DependencyError(f"stage-2 training needs a stage-1 checkpoint; {stage1} is missing")
    _, meta1, _ = load_stage1(stage1)
    holdout = set(cfg.holdout or meta1.get("holdout", ()))
    train_cfg = cfg.train_config()
    scene = MultiViewScene.from_directory(cfg.scene)
    corpus = split_style_corpus(cfg.styles, cfg.style_test_count, cfg.seed)
    if not corpus.train_paths:
        raise ConfigError("style corpus has no training images after the held-out split")
    images = [load_image(p) for p in corpus.train_paths]
    extractor = make_extractor(cfg.vgg_weights, cfg.seed)
    vae = pretrain_style_vae(
        images, extractor, epochs=train_cfg.vae_epochs, beta_kl=train_cfg.vae_beta_kl, seed=cfg.seed,
        size=train_cfg.style_size, latent_dim=train_cfg.latent_dim, hidden=train_cfg.vae_hidden,
    )
    save_run_config(cfg, out / "run_config_stage2.json")
    (out / "style_split.json").write_text(
        json.dumps({"train": list(corpus.train_paths), "test": list(corpus.test_paths)}, indent=2)
    )
    views = [i for i in range(len(scene)) if i not in holdout]
    _, _, path = train_style(
        scene, stage1, images, extractor, vae, train_cfg, out, views, resume=not args.restart,
        progress=_progress(args), metadata=_run_meta(cfg),
    )
    _emit(args, {"checkpoint": str(path), "config_hash": cfg.hash}, [f"stage-2 checkpoint: {path}"])


# ---------------------------------------------------------------------------
# rendering


def _load_model(path, vgg_weights):
    """``(field, stylizer or None, meta)`` from a stage-1 or stage-2 checkpoint."""
    from .estimators import SceneStylizer
    from .trainer import load_stage1

    _, meta = ckpt.load_checkpoint(path)
    if meta.get("stage") == 1:
        field, meta, _ = load_stage1(path)
        return field, None, meta
    if meta.get("stage") == 2:
        est = SceneStylizer.from_checkpoint(path, vgg_weights)
        return est.field_, est, meta
    raise DataError(f"{path}: unrecognized checkpoint stage {meta.get('stage')!r}")


def _build_path(spec_text, scene: MultiViewScene, frames, meta):
    kind, _, arg = spec_text.partition(":")
    K = scene.intrinsics[0]
    if kind == "scene":
        from .evaluation import NovelViewPath

        return NovelViewPath(scene.poses, K)
    if kind == "orbit":
        radius = float(np.mean([np.linalg.norm(p.center) for p in scene.poses]))
        return orbit_path(radius, K, frames)
    if kind == "interp":
        if arg:
            keys = [int(i) for i in arg.split(",")]
        else:
            keys = list(meta.get("holdout") or meta.get("run_config", {}).get("holdout") or [])
            if len(keys) < 2:
                keys = list(range(0, len(scene), max(1, len(scene) // 6)))
        if len(keys) < 2 or any(not 0 <= k < len(scene) for k in keys):
            raise ConfigError(f"interp path needs at least two valid view indices, got {keys}")
        return interpolate_path([scene.poses[k] for k in keys], K, frames, closed=True)
    raise ConfigError(f"unknown path spec {spec_text!r}; use scene, orbit or interp[:i,j,...]")


def _styles_from_args(args, stylizer):
    """Map style id -> flat appearance weights (None = photo-real)."""
    styles = {}
    if not args.style and not args.latent:
        return {PHOTOREAL: None}
    if stylizer is None:
        raise ConfigError("styles require a stage-2 checkpoint")
    from .estimators import appearance_for_style

    for s in args.style or ():
        w = appearance_for_style(stylizer.psi_, stylizer.vae_, stylizer.extractor_, load_image(s),
                                 size=stylizer.style_size_)
        styles[Path(s).stem] = w
    for s in args.latent or ():
        w = appearance_for_style(stylizer.psi_, stylizer.vae_, stylizer.extractor_, latent=np.load(s))
        styles[Path(s).stem] = w
    return styles


def _strategy(meta):
    from .renderer import SampleStrategy

    return SampleStrategy(**meta["strategy"])


def cmd_render(args):
    from .renderer import render_image

    _seed_everything(args.seed)
    field, stylizer, meta = _load_model(args.checkpoint, args.vgg_weights)
    scene = MultiViewScene.from_directory(args.scene)
    path = _build_path(args.path, scene, args.frames, meta)
    styles = _styles_from_args(args, stylizer)
    strategy = _strategy(meta)
    out = Path(args.out)
    written = {}
    for style_id, w in styles.items():
        d = out / style_id
        d.mkdir(parents=True, exist_ok=True)
        renders = [render_image(field, pose, path.intrinsics, strategy, args.tile_size, w) for pose in path.poses]
        max_depth = max(float(r.depth.max()) for r in renders) or 1.0
        for k, r in enumerate(renders):
            save_png(d / f"frame_{k:03d}.png", r.color)
            np.save(d / f"depth_{k:03d}.npy", r.depth)
            save_depth_png(d / f"depth_{k:03d}.png", r.depth, max_depth)
        written[style_id] = str(d)
    _emit(args, {"frames": len(path), "outputs": written},
          [f"{style_id}: {len(path)} frames in {d}" for style_id, d in written.items()])


def _write_inspection_images(out, path, renders, deltas, args):
    for style_id, frames in renders.frames.items():
        d = out / "frames" / style_id
        d.mkdir(parents=True, exist_ok=True)
        for k, frame in enumerate(frames):
            save_png(d / f"frame_{k:03d}.png", frame)
        # one warped-difference image per offset, for the first pair with a valid mask
        for delta in deltas:
            for t in range(delta, len(frames)):
                warp = compute_warp(
                    renders.depths[t], path.poses[t], path.poses[t - delta], path.intrinsics, None,
                    renders.opacities[t], renders.depths[t - delta], args.opacity_threshold, args.depth_tolerance,
                )
                if warp.mask.any():
                    diff = warped_difference(frames[t], frames[t - delta], warp)
                    save_png(out / "frames" / style_id / f"warpdiff_delta{delta}_t{t:03d}.png", np.clip(diff, 0, 1))
                    break


def cmd_evaluate(args):
    _seed_everything(args.seed)
    field, stylizer, meta = _load_model(args.checkpoint, args.vgg_weights)
    scene = MultiViewScene.from_directory(args.scene)
    path = _build_path(args.path, scene, args.frames, meta)
    styles = _styles_from_args(args, stylizer)
    deltas = sorted(set(args.delta or (1, 7)))
    scene_id = args.scene_id or Path(args.scene).resolve().name
    reports, renders = evaluate_sequence(
        field, path, styles, _strategy(meta), deltas, scene_id, args.tile_size,
        depth_tolerance=args.depth_tolerance, opacity_threshold=args.opacity_threshold,
    )
    _write_inspection_images(Path(args.out), path, renders, deltas, args)
    files = write_reports(reports, args.out)
    summary = {r.style_id: {str(d): r.mean(d) for d in deltas} for r in reports}
    _emit(args, {"reports": [str(f) for f in files], "means": summary},
          [f"{sid}: " + ", ".join(f"delta={d}: {v}" for d, v in m.items()) for sid, m in summary.items()])


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="nerfstyle", description="Stylized radiance fields: toy data, training, rendering and evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--json", action="store_true", help="print a machine-readable result object")
        return sp

    sp = common(sub.add_parser("make-toy-scene", help="write the synthetic ring-of-cameras scene"))
    sp.add_argument("out")
    sp.add_argument("--views", type=int, default=30)
    sp.add_argument("--size", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-depth", action="store_true", help="skip ground-truth depth maps")
    sp.set_defaults(func=cmd_make_toy_scene)

    sp = common(sub.add_parser("make-toy-styles", help="write procedural style images"))
    sp.add_argument("out")
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--size", type=int, default=256)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_make_toy_styles)

    vgg_help = f"VGG-19 state dict path, or 'random' for a seeded untrained extractor (default: ${VGG_WEIGHTS_ENV})"
    for name, func, help_text in (
        ("train-geometry", cmd_train_geometry, "stage 1: photo-real radiance field"),
        ("train-style", cmd_train_style, "stage 2: style VAE pretraining and hypernetwork"),
    ):
        sp = common(sub.add_parser(name, help=help_text))
        sp.add_argument("--config", help="run config JSON; flags below override it")
        sp.add_argument("--scene", help="scene directory (images/ + sparse/0)")
        sp.add_argument("--out", help="output / checkpoint directory")
        sp.add_argument("--preset", choices=["desk", "full"])
        sp.add_argument("--seed", type=int)
        sp.add_argument("--iters", type=int, help="iteration count for this stage")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="training config override (JSON value)")
        sp.add_argument("--holdout", help="comma-separated held-out view indices")
        sp.add_argument("--restart", action="store_true", help="ignore an existing checkpoint")
        if name == "train-style":
            sp.add_argument("--styles", help="style corpus directory")
            sp.add_argument("--style-test-count", type=int, help="style images held out of training")
            sp.add_argument("--vgg-weights", help=vgg_help)
        sp.set_defaults(func=func)

    for name, func, help_text in (
        ("render", cmd_render, "render a camera path, photo-real or stylized"),
        ("evaluate", cmd_evaluate, "short/long-range consistency of stylized paths"),
    ):
        sp = common(sub.add_parser(name, help=help_text))
        sp.add_argument("--checkpoint", required=True, help="stage1.npz or stage2.npz")
        sp.add_argument("--scene", required=True, help="scene directory supplying intrinsics and key poses")
        sp.add_argument("--style", action="append", help="style image (repeatable)")
        sp.add_argument("--latent", action="append", help="style latent .npy (repeatable)")
        sp.add_argument("--path", default="interp", help="scene | orbit | interp[:i,j,...] (default: interp)")
        sp.add_argument("--frames", type=int, default=60)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--tile-size", type=int, default=4096)
        sp.add_argument("--vgg-weights", help=vgg_help)
        if name == "evaluate":
            sp.add_argument("--delta", type=int, action="append", help="frame offset (repeatable; default 1 and 7)")
            sp.add_argument("--scene-id")
            sp.add_argument("--depth-tolerance", type=float, default=0.05)
            sp.add_argument("--opacity-threshold", type=float, default=0.05)
        sp.set_defaults(func=func)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except NerfStyleError as exc:
        return _fail(args, exc, exc.exit_code)
    except FileNotFoundError as exc:
        return _fail(args, exc, DataError.exit_code)
    except (IndexError, ValueError) as exc:
        return _fail(args, exc, ConfigError.exit_code)
    return 0


def _fail(args, exc, code):
    if getattr(args, "json", False):
        print(json.dumps({"ok": False, "error": type(exc).__name__, "message": str(exc), "exit_code": code}))
    else:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
