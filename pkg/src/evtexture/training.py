"""Charbonnier loss, flip augmentation, synthetic datasets and the training loop."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .data import ClipRecord, synth_clip
from .evaluation import psnr
from .events import SimulatorConfig, VoxelGrid
from .network import EvTexture, save_checkpoint

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "loss", "lr", "val_psnr")


@dataclass(frozen=True)
class TrainConfig:
    lr_main: float = 2e-4
    lr_flow: float = 2.5e-5
    flow_freeze_iters: int = 100
    total_iters: int = 2000
    batch: int = 2
    crop: int = 32
    seq_len: int = 5
    charbonnier_eps: float = 1e-3
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    val_every: int = 100
    ckpt_every: int = 500
    # synthetic corpus
    kinds: tuple[str, ...] = ("checkerboard", "perlin-texture")
    train_clips: int = 16
    clip_frames: int = 7
    clip_size: int = 128
    max_speed: float = 3.0
    contrast: float = 0.3
    val_clips: int = 2

    def __post_init__(self):
        if self.lr_main <= 0 or self.lr_flow <= 0:
            raise ValueError("learning rates must be positive")
        if self.crop % 4:
            raise ValueError(f"crop must be divisible by 4, got {self.crop}")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if self.total_iters < 0 or self.batch < 1:
            raise ValueError("total_iters must be >= 0 and batch >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("betas", "kinds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def preset(cls, name: str) -> "TrainConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**PRESETS[name])


PRESETS = {
    # the short desk schedule needs a larger step; the flow/main ratio is kept
    "desk": dict(lr_main=1e-3, lr_flow=1.25e-4),
    "paper": dict(lr_main=2e-4, lr_flow=2.5e-5, flow_freeze_iters=5000, total_iters=300000, batch=8,
                  crop=64, seq_len=15, val_every=5000, ckpt_every=5000),
}


class TrainingDivergedError(RuntimeError):
    pass


def charbonnier_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Mean of sqrt((pred - gt)^2 + eps^2)."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return torch.sqrt((pred - gt) ** 2 + eps * eps).mean()


def augment(lr, hr, voxels, rng: np.random.Generator):
    """Random horizontal/vertical flips applied identically to all three inputs.

    ``voxels`` may be a (T-1, B, h, w) array or a list of VoxelGrid; flipping a
    voxel mirrors event positions and leaves polarity alone.
    """
    hflip, vflip = bool(rng.random() < 0.5), bool(rng.random() < 0.5)
    return flip_all(lr, hr, voxels, hflip, vflip)


def flip_all(lr, hr, voxels, hflip: bool, vflip: bool):
    axes = tuple(ax for ax, on in ((-1, hflip), (-2, vflip)) if on)

    def flip(a):
        return np.flip(a, axis=axes).copy() if axes else a

    if isinstance(voxels, (list, tuple)):
        voxels = [VoxelGrid(flip(v.bins), v.normalized, v.eta) for v in voxels]
    else:
        voxels = flip(voxels)
    return flip(lr), flip(hr), voxels


def make_corpus(n: int, cfg: TrainConfig, seed: int, scale: int = 4, bins: int = 5,
                frames: int | None = None, size: int | None = None) -> list[ClipRecord]:
    """Seeded synthetic clips cycling through ``cfg.kinds`` with random velocities."""
    rng = np.random.default_rng(seed)
    sim = SimulatorConfig(contrast_mean=cfg.contrast, contrast_std=cfg.contrast / 10)
    clips = []
    for i in range(n):
        kind = cfg.kinds[i % len(cfg.kinds)]
        speed, angle = rng.uniform(0.5, cfg.max_speed), rng.uniform(0, 2 * np.pi)
        clip_seed = int(rng.integers(2**31))
        clips.append(synth_clip(kind, frames or cfg.clip_frames, size or cfg.clip_size, size or cfg.clip_size,
                                (speed * np.cos(angle), speed * np.sin(angle)), clip_seed, scale, bins,
                                dataclasses.replace(sim, rng_seed=clip_seed)))
    return clips


class ClipDataset:
    """Random (time, space) crops from a fixed list of clips."""

    def __init__(self, clips: list[ClipRecord], crop: int, seq_len: int, augment: bool = True):
        if not clips:
            raise ValueError("dataset needs at least one clip")
        self.clips = clips
        self.crop = crop
        self.seq_len = seq_len
        self.augment = augment
        self.scale = clips[0].scale
        self._voxels = [c.voxel_array() for c in clips]
        for c in clips:
            if len(c.lr_frames) < seq_len or min(c.lr_frames.shape[-2:]) < crop:
                raise ValueError(f"clip {c.name} is too small for seq_len={seq_len}, crop={crop}")

    def __len__(self):
        return len(self.clips)

    def sample_one(self, rng):
        k = int(rng.integers(len(self.clips)))
        clip, vox = self.clips[k], self._voxels[k]
        s, c = self.scale, self.crop
        t0 = int(rng.integers(len(clip.lr_frames) - self.seq_len + 1))
        h, w = clip.lr_frames.shape[-2:]
        y, x = int(rng.integers(h - c + 1)), int(rng.integers(w - c + 1))
        lr = clip.lr_frames[t0:t0 + self.seq_len, :, y:y + c, x:x + c]
        hr = clip.hr_frames[t0:t0 + self.seq_len, :, s * y:s * (y + c), s * x:s * (x + c)]
        vx = vox[t0:t0 + self.seq_len - 1, :, y:y + c, x:x + c]
        if self.augment:
            lr, hr, vx = augment(lr, hr, vx, rng)
        return lr, hr, vx

    def sample(self, rng, batch: int, dtype=torch.float32):
        items = [self.sample_one(rng) for _ in range(batch)]
        return tuple(torch.as_tensor(np.stack(col), dtype=dtype) for col in zip(*items))


def clip_tensors(clip: ClipRecord, dtype=torch.float32):
    lr = torch.as_tensor(clip.lr_frames, dtype=dtype)[None]
    vox = torch.as_tensor(clip.voxel_array(), dtype=dtype)[None]
    return lr, vox


@torch.no_grad()
def super_resolve(model: EvTexture, clip: ClipRecord) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    out = model(*clip_tensors(clip, dtype))[0].double().numpy()
    model.train(was_training)
    return out


def bicubic_frames(clip: ClipRecord) -> np.ndarray:
    lr = torch.as_tensor(clip.lr_frames)
    return F.interpolate(lr, scale_factor=clip.scale, mode="bicubic", align_corners=False).numpy()


def clip_psnr(frames, clip: ClipRecord, mode: str = "Y") -> float:
    frames = np.clip(frames, 0.0, 1.0)
    return float(np.mean([psnr(p, g, mode) for p, g in zip(frames, clip.hr_frames)]))


def validate(model: EvTexture, clips: list[ClipRecord], mode: str = "Y") -> float:
    """Mean Y-PSNR of the model over ``clips``."""
    return float(np.mean([clip_psnr(super_resolve(model, c), c, mode) for c in clips]))


def bicubic_psnr(clips: list[ClipRecord], mode: str = "Y") -> float:
    return float(np.mean([clip_psnr(bicubic_frames(c), c, mode) for c in clips]))


@dataclass
class TrainResult:
    history: list[dict]
    initial_val_psnr: float | None
    final_val_psnr: float | None
    checkpoint: Path | None
    metrics_csv: Path | None


def cosine_lr(base: float, it: int, total: int) -> float:
    """Learning rate for step ``it`` (0-based) annealed from ``base`` to 0."""
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * it / total))


def build_optimizer(model: EvTexture, cfg: TrainConfig):
    flow_ids = {id(p) for p in model.flow_parameters()}
    main = [p for p in model.parameters() if id(p) not in flow_ids]
    groups = [{"params": main, "lr": cfg.lr_main, "base_lr": cfg.lr_main, "name": "main"}]
    if flow_ids:
        groups.append({"params": model.flow_parameters(), "lr": cfg.lr_flow, "base_lr": cfg.lr_flow,
                       "name": "flow"})
    return torch.optim.Adam(groups, betas=cfg.betas)


def _dump_batch(out_dir, it, lr, hr, vox):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nan_batch_{it:06d}.npz"
    np.savez(path, lr=lr.numpy(), hr=hr.numpy(), voxels=vox.numpy(), iter=it)
    return path


def train(model: EvTexture, dataset: ClipDataset, cfg: TrainConfig, out_dir=None,
          val_clips: list[ClipRecord] | None = None) -> TrainResult:
    """Optimize ``model`` for ``cfg.total_iters`` steps.

    Writes ``metrics.csv`` (iter, loss, lr, val_psnr), periodic
    ``ckpt_<iter>.ckpt`` files and a final ``model.ckpt`` under ``out_dir``.
    Row 0 holds the validation score before any update.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dtype = next(model.parameters()).dtype
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    opt = build_optimizer(model, cfg)
    flow_params = model.flow_parameters()
    model.train()

    history = []
    initial = validate(model, val_clips) if val_clips else None
    history.append({"iter": 0, "loss": None, "lr": None, "val_psnr": initial})
    val = initial
    for it in range(cfg.total_iters):
        step = it + 1
        for group in opt.param_groups:
            group["lr"] = cosine_lr(group["base_lr"], it, cfg.total_iters)
        lr, hr, vox = dataset.sample(rng, cfg.batch, dtype)
        loss = charbonnier_loss(model(lr, vox), hr, cfg.charbonnier_eps)
        if not torch.isfinite(loss):
            dump = _dump_batch(out_dir, step, lr, hr, vox)
            raise TrainingDivergedError(f"non-finite loss at iteration {step}; batch saved to {dump}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if step <= cfg.flow_freeze_iters:
            for p in flow_params:
                p.grad = None  # Adam skips parameters without gradients
        opt.step()

        row = {"iter": step, "loss": loss.item(), "lr": opt.param_groups[0]["lr"], "val_psnr": None}
        if val_clips and (step % cfg.val_every == 0 or step == cfg.total_iters):
            val = row["val_psnr"] = validate(model, val_clips)
            logger.info("iter %d loss %.5f val_psnr %.3f", step, row["loss"], val)
        history.append(row)
        if out_dir is not None and cfg.ckpt_every and step % cfg.ckpt_every == 0:
            save_checkpoint(model, out_dir / f"ckpt_{step:06d}.ckpt", {"iter": step})

    ckpt = csv_path = None
    if out_dir is not None:
        ckpt = save_checkpoint(model, out_dir / "model.ckpt", {"iter": cfg.total_iters, "train": cfg.to_dict()})
        csv_path = write_metrics(history, out_dir / "metrics.csv")
    return TrainResult(history, initial, val, ckpt, csv_path)


def write_metrics(history: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in history:
            writer.writerow(["" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k])
                             for k in METRIC_COLUMNS])
    return path
