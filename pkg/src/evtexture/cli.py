"""Command-line entry point: ``evtexture <command> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

logger = logging.getLogger("evtexture")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
MANIFEST_NAME = "run_manifest.json"


class UsageError(ValueError):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def resolve_seed(args, config: dict | None = None) -> int:
    """--seed flag, then the config file, then EVTEXTURE_SEED, then 0."""
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    if config and "seed" in config:
        return int(config["seed"])
    env = os.environ.get("EVTEXTURE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"EVTEXTURE_SEED must be an integer, got {env!r}") from None
    return 0


def config_hash(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(out_dir, command: str, argv, resolved: dict, seed: int, started: float) -> Path:
    import torch

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": resolved,
        "config_hash": config_hash(resolved),
        "seed": seed,
        "versions": {"evtexture": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "torch": torch.__version__},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "elapsed_s": round(time.time() - started, 3),
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def load_yaml(path) -> dict:
    import yaml

    if path is None:
        return {}
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level of the config must be a mapping")
    return data


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise OSError(f"{what} directory not found: {path}")


def _require_file(path, what):
    if not Path(path).is_file():
        raise OSError(f"{what} not found: {path}")


def _frame_times(n, fps):
    from .data import frame_timestamps

    if fps <= 0:
        raise UsageError("--fps must be positive")
    return frame_timestamps(n, fps)


# -- commands ---------------------------------------------------------------

def cmd_simulate(args):
    from .data import read_frames
    from .events import SimulatorConfig, simulate_events, write_events_csv, write_evt1

    _require_dir(args.frames, "frame")
    cfg = SimulatorConfig(args.contrast_mean, args.contrast_std, args.interp_steps, rng_seed=args.seed_value)
    frames = read_frames(args.frames)
    stream = simulate_events(frames, cfg, timestamps=_frame_times(len(frames), args.fps))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    (write_events_csv if out.suffix.lower() == ".csv" else write_evt1)(stream, out)
    print(f"{len(stream)} events -> {out}")
    return out.parent, dataclasses.asdict(cfg) | {"fps": args.fps, "frames": str(args.frames)}


def cmd_voxelize(args):
    from .events import (downsample_voxel, events_to_voxels, normalize_voxel, read_events, save_voxel,
                         voxelize)

    _require_file(args.events, "event file")
    if args.bins < 2:
        raise UsageError("--bins must be >= 2")
    stream = read_events(args.events, args.width, args.height)
    out = Path(args.out)
    if args.num_frames:
        grids = events_to_voxels(stream, _frame_times(args.num_frames, args.fps), args.bins, args.scale)
    else:
        grid = voxelize(stream, args.bins)
        if not args.raw:
            grid = normalize_voxel(grid)
        grids = [downsample_voxel(grid, args.scale) if args.scale > 1 else grid]
    out.mkdir(parents=True, exist_ok=True)
    for i, grid in enumerate(grids):
        save_voxel(grid, out / f"voxel_{i:06d}")
    print(f"{len(grids)} voxel grid(s) of shape {grids[0].shape} -> {out}")
    return out, {"bins": args.bins, "scale": args.scale, "num_frames": args.num_frames, "fps": args.fps}


def cmd_synth_data(args):
    from .data import synth_clip, write_clip
    from .events import SimulatorConfig

    out = Path(args.out)
    h, w = args.size
    rng = np.random.default_rng(args.seed_value)
    resolved = {"kind": args.kind, "frames": args.frames, "size": [h, w], "scale": args.scale, "bins": args.bins,
                "count": args.count, "contrast": args.contrast, "fps": args.fps}
    specs = []
    for i in range(args.count):
        if args.velocity is not None:
            vel = tuple(args.velocity)
        else:
            speed, ang = rng.uniform(0.5, 3.0), rng.uniform(0, 2 * np.pi)
            vel = (speed * np.cos(ang), speed * np.sin(ang))
        specs.append((vel, int(rng.integers(2**31))))
    clips = []
    for i, (vel, seed) in enumerate(specs):
        sim = SimulatorConfig(contrast_mean=args.contrast, contrast_std=args.contrast / 10, rng_seed=seed)
        clips.append(synth_clip(args.kind, args.frames, h, w, vel, seed, args.scale, args.bins, sim, args.fps,
                                name=f"{args.kind}-{i:03d}"))
    for i, clip in enumerate(clips):
        dest = out if args.count == 1 else out / f"clip_{i:03d}"
        write_clip(clip, dest)
        print(f"{clip.name}: {len(clip.events)} events, texture magnitude {clip.texture_magnitude:.4f} -> {dest}")
    return out, resolved


def _train_configs(args, config: dict):
    from .network import NetworkConfig, variant_config
    from .training import TrainConfig

    train_cfg = dict(config.get("train", {}))
    overrides = {"total_iters": args.iters, "lr_main": args.lr, "batch": args.batch, "crop": args.crop,
                 "seq_len": args.seq_len}
    preset = args.preset or config.get("preset", "desk")
    base = TrainConfig.preset(preset).to_dict()
    base.update(train_cfg)
    base.update({k: v for k, v in overrides.items() if v is not None})
    base["seed"] = resolve_seed(args, train_cfg)
    tcfg = TrainConfig.from_dict(base)
    variant = args.variant or config.get("variant", "evtexture")
    ncfg = variant_config(variant, NetworkConfig.from_dict(config.get("network", {})))
    return tcfg, ncfg, variant


def _run_training(args, tcfg, ncfg, out: Path):
    import torch

    from .network import EvTexture, pretrain_flow
    from .training import ClipDataset, bicubic_psnr, make_corpus, train

    torch.manual_seed(tcfg.seed)
    if args.data:
        from .data import load_clip_dir

        dirs = sorted(p for p in Path(args.data).iterdir() if (p / "meta.json").is_file())
        if (Path(args.data) / "meta.json").is_file():
            dirs = [Path(args.data)]
        if not dirs:
            raise OSError(f"no clip directories under {args.data}")
        clips = [load_clip_dir(d, ncfg.scale, ncfg.bins) for d in dirs]
    else:
        clips = make_corpus(tcfg.train_clips, tcfg, seed=tcfg.seed + 1, scale=ncfg.scale, bins=ncfg.bins)
    val = make_corpus(tcfg.val_clips, tcfg, seed=tcfg.seed + 2, scale=ncfg.scale, bins=ncfg.bins, frames=5)
    model = EvTexture(ncfg)
    if args.flow_pretrain and ncfg.use_motion:
        pretrain_flow(model.flownet, iters=args.flow_pretrain, seed=tcfg.seed)
    result = train(model, ClipDataset(clips, tcfg.crop, tcfg.seq_len), tcfg, out, val_clips=val)
    summary = {"variant": args.variant_name, "iters": tcfg.total_iters, "bicubic_psnr": bicubic_psnr(val),
               "initial_val_psnr": result.initial_val_psnr, "final_val_psnr": result.final_val_psnr,
               "checkpoint": str(result.checkpoint)}
    write_json(summary, out / "summary.json")
    print(json.dumps(summary, indent=2))
    return summary


def cmd_train(args):
    config = load_yaml(args.config)
    tcfg, ncfg, variant = _train_configs(args, config)
    args.seed_value = tcfg.seed
    args.variant_name = variant
    out = Path(args.out)
    _run_training(args, tcfg, ncfg, out)
    return out, {"train": tcfg.to_dict(), "network": ncfg.to_dict(), "variant": variant}


def _ablation_config(args, config):
    from .network import NetworkConfig, variant_config

    base = NetworkConfig.from_dict(config.get("network", {}))
    ncfg = variant_config(args.variant, base)
    axes = {}
    if args.updater:
        axes["updater"] = args.updater
    if args.iterative:
        axes["iterative"] = args.iterative == "on"
    if args.residual:
        axes["residual"] = args.residual == "on"
    if args.iterations:
        axes["bins"] = args.iterations
    return ncfg.replace(**axes)


def cmd_ablate(args):
    from .network import EvTexture

    config = load_yaml(args.config)
    ncfg = _ablation_config(args, config)
    model = EvTexture(ncfg)
    ite = getattr(model.forward_prop, "ite", None)
    summary = {
        "variant": args.variant,
        "updater": ncfg.updater,
        "iterative": ncfg.iterative,
        "residual": ncfg.residual,
        "iterations": ncfg.bins if ncfg.iterative else 1,
        "texture_module": type(ite).__name__ if ite is not None else None,
        "motion_branch": ncfg.use_motion,
        "parameters": sum(p.numel() for p in model.parameters()),
        "network": ncfg.to_dict(),
    }
    if args.out is None:
        print(json.dumps(summary, indent=2))
        return None, summary
    tcfg, _, _ = _train_configs(args, config)
    args.seed_value = tcfg.seed
    args.variant_name = args.variant
    out = Path(args.out)
    summary["training"] = _run_training(args, tcfg, ncfg, out)
    write_json(summary, out / "ablation.json")
    return out, {"train": tcfg.to_dict(), "network": ncfg.to_dict(), "variant": args.variant}


def cmd_infer(args):
    import torch

    from .data import read_frames, write_frames
    from .evaluation import evaluate_clip, texture_magnitude
    from .events import downsample_voxel, normalize_voxel, read_events, split_intervals, voxelize
    from .network import load_checkpoint

    _require_dir(args.frames, "frame")
    _require_file(args.events, "event file")
    _require_file(args.ckpt, "checkpoint")
    if args.gt:
        _require_dir(args.gt, "ground-truth")
    model, manifest = load_checkpoint(args.ckpt)
    cfg = model.cfg
    if args.scale is not None and args.scale != cfg.scale:
        raise UsageError(f"--scale {args.scale} does not match the checkpoint's scale {cfg.scale}")
    frames = read_frames(args.frames)
    t, _, h, w = frames.shape
    stream = read_events(args.events, args.width, args.height)
    if (stream.height, stream.width) == (h, w):
        factor = 1
    elif (stream.height, stream.width) == (h * cfg.scale, w * cfg.scale):
        factor = cfg.scale
    else:
        raise UsageError(f"event sensor {stream.width}x{stream.height} matches neither the "
                         f"{w}x{h} frames nor their {cfg.scale}x upscale")
    grids = []
    for chunk in split_intervals(stream, _frame_times(t, args.fps)):
        grid = normalize_voxel(voxelize(chunk, cfg.bins))
        grids.append(downsample_voxel(grid, factor) if factor > 1 else grid)
    vox = np.stack([g.bins for g in grids])
    with torch.no_grad():
        sr = model(torch.as_tensor(frames, dtype=torch.float32)[None],
                   torch.as_tensor(vox, dtype=torch.float32)[None])[0].double().numpy()
    sr = np.clip(sr, 0.0, 1.0)
    out = Path(args.out)
    write_frames(sr, out)
    exported = read_frames(out)
    tex = texture_magnitude(exported)
    metrics = {"clip": Path(args.frames).name, "frames": t, "scale": cfg.scale,
               "texture_magnitude": tex.magnitude, "level": tex.level}
    if args.gt:
        gt = read_frames(args.gt)
        report = evaluate_clip(exported, gt, args.mode, args.border, clip=metrics["clip"])
        metrics.update(report.to_dict(tex.magnitude, tex.level))
    write_json(metrics, out / "metrics.json")
    print(f"{t} frames -> {out}")
    return out, {"ckpt": str(args.ckpt), "config": cfg.to_dict(), "fps": args.fps, "mode": args.mode,
                 "border": args.border, "checkpoint_version": manifest.get("version")}


def cmd_eval(args):
    from .data import read_frames
    from .evaluation import evaluate_clip, texture_magnitude, validate_report

    _require_dir(args.pred, "prediction")
    _require_dir(args.gt, "ground-truth")
    if args.border < 0:
        raise UsageError("--border must be >= 0")
    pred, gt = read_frames(args.pred), read_frames(args.gt)
    if pred.shape != gt.shape:
        raise UsageError(f"prediction frames {pred.shape} do not match ground truth {gt.shape}")
    tex = texture_magnitude(gt)
    report = evaluate_clip(pred, gt, args.mode, args.border, clip=Path(args.gt).name).to_dict(
        tex.magnitude, tex.level)
    validate_report(report)
    if args.out:
        write_json(report, args.out)
    print(json.dumps({k: report[k] for k in ("clip", "psnr", "ssim", "level")}))
    out_dir = Path(args.out).parent if args.out else None
    return out_dir, {"mode": args.mode, "border": args.border, "pred": str(args.pred), "gt": str(args.gt)}


def cmd_texture_mag(args):
    from .data import read_frames
    from .evaluation import texture_magnitude

    _require_dir(args.frames, "frame")
    rep = texture_magnitude(read_frames(args.frames), alpha=args.alpha)
    print(rep.magnitude)
    if args.out:
        write_json({"clip": Path(args.frames).name, "texture_magnitude": rep.magnitude, "level": rep.level,
                    "per_frame_contrast": rep.per_frame_contrast, "clamped": rep.clamped}, args.out)
        return Path(args.out).parent, {"alpha": args.alpha}
    return None, {"alpha": args.alpha}


def cmd_profile(args):
    from .data import read_frames
    from .evaluation import save_profile, temporal_profile

    _require_dir(args.frames, "frame")
    frames = read_frames(args.frames)
    profile = temporal_profile(frames, args.column)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_profile(profile, out)
    print(f"profile {profile.shape[0]}x{profile.shape[1]} -> {out}")
    return out.parent, {"column": args.column}


# -- parser -----------------------------------------------------------------

def _on_off(value):
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value


def _add_train_flags(p):
    p.add_argument("--config", help="YAML file with train/network/variant sections")
    p.add_argument("--preset", choices=["desk", "paper"])
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--data", help="directory of clips written by synth-data (default: synthesize in memory)")
    p.add_argument("--flow-pretrain", type=int, default=0, metavar="ITERS",
                   help="supervised flow warm-up on synthetic shifts before training")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="evtexture", description="Event-driven texture-enhanced video super-resolution.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, help="global seed (fallback: $EVTEXTURE_SEED, then 0)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)
    # --seed is also accepted after the command name
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed")

    p = sub.add_parser("simulate", parents=[common], help="simulate events from a frame directory")
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True, help="output .evt1 or .csv file")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--contrast-mean", type=float, default=1.0)
    p.add_argument("--contrast-std", type=float, default=0.1)
    p.add_argument("--interp-steps", type=int, default=8)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("voxelize", parents=[common], help="turn an event file into voxel grids")
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--num-frames", type=int, help="split at this many frame times (t = i / fps)")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--scale", type=int, default=1, help="bicubic downsampling factor")
    p.add_argument("--raw", action="store_true", help="skip normalization (whole-stream mode only)")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("synth-data", parents=[common], help="write synthetic moving-texture clips")
    p.add_argument("--kind", choices=["checkerboard", "perlin-texture", "moving-text"], default="checkerboard")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=7)
    p.add_argument("--size", type=int, nargs=2, default=[128, 128], metavar=("H", "W"))
    p.add_argument("--velocity", type=float, nargs=2, metavar=("VX", "VY"))
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--contrast", type=float, default=1.0, help="mean event threshold")
    p.add_argument("--fps", type=float, default=30.0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--out", required=True)
    p.add_argument("--variant")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="super-resolve a clip")
    p.add_argument("--frames", required=True, help="directory of LR PNG frames")
    p.add_argument("--events", required=True, help="event stream covering all frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--gt", help="optional HR frames for PSNR/SSIM")
    p.add_argument("--mode", choices=["Y", "RGB"], default="Y")
    p.add_argument("--border", type=int, default=0)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM report for predicted frames")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mode", choices=["Y", "RGB"], default="Y")
    p.add_argument("--border", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("texture-mag", parents=[common], help="texture magnitude of a frame directory")
    p.add_argument("--frames", required=True)
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_texture_mag)

    p = sub.add_parser("profile", parents=[common], help="temporal profile of one pixel column")
    p.add_argument("--frames", required=True)
    p.add_argument("--column", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("ablate", parents=[common], help="build (and optionally train) an ablation variant")
    p.add_argument("--variant", default="evtexture",
                   choices=["evtexture", "model-a", "model-b", "model-c", "model-d", "model-e", "model-f",
                            "model-g", "evtexture+"])
    p.add_argument("--updater", choices=["convgru", "conv"])
    p.add_argument("--iterative", type=_on_off)
    p.add_argument("--residual", type=_on_off)
    p.add_argument("--iterations", type=int, choices=[3, 5, 8])
    p.add_argument("--out", help="train the variant into this directory; omit for a dry-run summary")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        args.seed_value = resolve_seed(args)
        out_dir, resolved = args.func(args)
        if out_dir is not None:
            write_manifest(out_dir, args.command, argv, resolved, args.seed_value, started)
    except (UsageError, ValueError) as exc:
        print(f"evtexture {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"evtexture {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
