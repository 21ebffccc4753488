"""Clip records, LR generation, synthetic moving-texture clips and on-disk clips."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .evaluation import texture_magnitude
from .events import EventStream, SimulatorConfig, VoxelGrid, events_to_voxels, read_events, simulate_events, \
    split_intervals, write_evt1
from .resample import bicubic_downsample

logger = logging.getLogger(__name__)

KINDS = ("checkerboard", "perlin-texture", "moving-text")
MAX_SPEED = 4.0


@dataclass
class ClipRecord:
    hr_frames: np.ndarray  # (T, 3, H, W) in [0, 1]
    lr_frames: np.ndarray  # (T, 3, H/s, W/s)
    hr_events: list[EventStream]  # one stream per interval
    lr_voxels: list[VoxelGrid]
    name: str
    texture_magnitude: float
    scale: int = 4
    fps: float = 30.0
    events: EventStream | None = None  # the full, unsplit stream

    def __post_init__(self):
        t = len(self.hr_frames)
        if len(self.lr_voxels) != t - 1:
            raise ValueError(f"{t} frames need {t - 1} voxel grids, got {len(self.lr_voxels)}")
        if self.lr_frames.shape[-2:] != tuple(s // self.scale for s in self.hr_frames.shape[-2:]):
            raise ValueError("LR frames do not match HR frames at the given scale")

    @property
    def timestamps(self) -> np.ndarray:
        return frame_timestamps(len(self.hr_frames), self.fps)

    def voxel_array(self) -> np.ndarray:
        """(T-1, B, h, w) float32 stack of the LR voxels."""
        return np.stack([v.bins for v in self.lr_voxels]).astype(np.float32)


def frame_timestamps(n: int, fps: float) -> np.ndarray:
    return np.arange(n, dtype=np.float64) / fps


def make_lr(hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic (Catmull-Rom, antialiased) downsampling of the last two axes."""
    return bicubic_downsample(np.asarray(hr, dtype=np.float64), scale)


def quantize(frames: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0) / 255.0


# -- pattern generators ------------------------------------------------------

def _two_colors(rng):
    lo = rng.uniform(0.05, 0.35, size=3)
    hi = rng.uniform(0.65, 0.95, size=3)
    return (lo, hi) if rng.random() < 0.5 else (hi, lo)


def _colorize(mask, rng):
    a, b = _two_colors(rng)
    return a[:, None, None] + (b - a)[:, None, None] * mask[None]


def checkerboard(h, w, rng) -> np.ndarray:
    cell = int(rng.integers(3, 9))
    oy, ox = rng.integers(0, 2 * cell, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    mask = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
    return _colorize(mask, rng)


def _perlin(h, w, res, rng):
    gy, gx = int(math.ceil(h / res)) + 1, int(math.ceil(w / res)) + 1
    angles = rng.uniform(0, 2 * np.pi, size=(gy, gx))
    grads = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    yy, xx = np.mgrid[0:h, 0:w] / res
    y0, x0 = np.floor(yy).astype(int), np.floor(xx).astype(int)
    fy, fx = yy - y0, xx - x0

    def dot(dy, dx):
        g = grads[y0 + dy, x0 + dx]
        return g[..., 0] * (fx - dx) + g[..., 1] * (fy - dy)

    fade = lambda t: t * t * t * (t * (t * 6 - 15) + 10)
    u, v = fade(fx), fade(fy)
    top = dot(0, 0) + u * (dot(0, 1) - dot(0, 0))
    bottom = dot(1, 0) + u * (dot(1, 1) - dot(1, 0))
    return top + v * (bottom - top)


def perlin_texture(h, w, rng, octaves=4) -> np.ndarray:
    res = float(rng.uniform(10, 20))
    noise = np.zeros((h, w))
    amp = 1.0
    for _ in range(octaves):
        noise += amp * _perlin(h, w, res, rng)
        res, amp = max(res / 2, 1.5), amp * 0.6
    noise = (noise - noise.min()) / max(noise.max() - noise.min(), 1e-12)
    return _colorize(noise, rng)


def text_texture(h, w, rng) -> np.ndarray:
    from PIL import Image, ImageDraw, ImageFont

    size = int(rng.integers(9, 15))
    font = ImageFont.load_default(size=size)
    img = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(img)
    alphabet = np.array(list("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789"))
    y = -int(rng.integers(0, size))
    while y < h:
        line = "".join(rng.choice(alphabet, size=w // max(size // 2, 1) + 2))
        draw.text((-int(rng.integers(0, size)), y), line, fill=255, font=font)
        y += size + int(rng.integers(1, 4))
    return _colorize(np.asarray(img, dtype=np.float64) / 255.0, rng)


PATTERNS = {"checkerboard": checkerboard, "perlin-texture": perlin_texture, "moving-text": text_texture}


def render_translation(base: np.ndarray, T: int, H: int, W: int, velocity, origin) -> np.ndarray:
    """Frames where content moves by ``velocity`` (vx, vy) px per frame.

    Frame t samples ``base`` bilinearly at (y + oy - vy*t, x + ox - vx*t).
    """
    vx, vy = velocity
    oy, ox = origin
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    frames = np.empty((T, base.shape[0], H, W))
    for t in range(T):
        coords = [yy + oy - vy * t, xx + ox - vx * t]
        for c in range(base.shape[0]):
            frames[t, c] = map_coordinates(base[c], coords, order=1, mode="nearest")
    return frames


def synth_clip(kind: str = "checkerboard", T: int = 5, H: int = 64, W: int = 64, velocity=(1.0, 0.0),
               seed: int = 0, scale: int = 4, bins: int = 5, sim_cfg: SimulatorConfig | None = None,
               fps: float = 30.0, name: str | None = None) -> ClipRecord:
    """Render a translating texture, simulate its events and build the LR inputs.

    Args:
        kind: One of ``KINDS``.
        T: Number of frames.
        H, W: HR size; must be divisible by 4 * scale.
        velocity: (vx, vy) in HR pixels per frame, at most 4 in magnitude.
        seed: Seeds the pattern and, unless ``sim_cfg`` is given, the event thresholds.
        scale: Downsampling factor for LR frames and voxels.
        bins: Voxel bins per interval.
    """
    if kind not in PATTERNS:
        raise ValueError(f"unknown clip kind {kind!r}; choose from {KINDS}")
    if H % (4 * scale) or W % (4 * scale):
        raise ValueError(f"H and W must be divisible by {4 * scale}, got {H}x{W}")
    vx, vy = map(float, velocity)
    if math.hypot(vx, vy) > MAX_SPEED:
        raise ValueError(f"speed {math.hypot(vx, vy):.3g} exceeds {MAX_SPEED} px/frame")
    if T < 2:
        raise ValueError("a clip needs at least two frames")
    rng = np.random.default_rng(seed)
    span_y, span_x = abs(vy) * (T - 1), abs(vx) * (T - 1)
    bh, bw = H + int(math.ceil(span_y)) + 2, W + int(math.ceil(span_x)) + 2
    base = PATTERNS[kind](bh, bw, rng)
    origin = (1 + max(vy, 0.0) * (T - 1), 1 + max(vx, 0.0) * (T - 1))
    hr = quantize(render_translation(base, T, H, W, (vx, vy), origin))
    cfg = sim_cfg or SimulatorConfig(rng_seed=seed)
    return build_clip(hr, scale, bins, cfg, fps, name or f"{kind}-{seed}")


def build_clip(hr: np.ndarray, scale: int, bins: int, sim_cfg: SimulatorConfig, fps: float, name: str,
               events: EventStream | None = None) -> ClipRecord:
    """Derive LR frames, per-interval events and LR voxels from HR frames."""
    ts = frame_timestamps(len(hr), fps)
    if events is None:
        events = simulate_events(hr, sim_cfg, timestamps=ts)
    return ClipRecord(
        hr_frames=hr,
        lr_frames=make_lr(hr, scale),
        hr_events=split_intervals(events, ts),
        lr_voxels=events_to_voxels(events, ts, bins, scale),
        name=name,
        texture_magnitude=texture_magnitude(hr).magnitude,
        scale=scale,
        fps=fps,
        events=events,
    )


# -- disk I/O ----------------------------------------------------------------

def read_frames(frame_dir) -> np.ndarray:
    """Load ``*.png`` in lexicographic order as (T, 3, H, W) floats in [0, 1]."""
    from PIL import Image

    frame_dir = Path(frame_dir)
    if not frame_dir.is_dir():
        raise OSError(f"frame directory not found: {frame_dir}")
    paths = sorted(frame_dir.glob("*.png"))
    if not paths:
        raise OSError(f"no PNG frames in {frame_dir}")
    frames = []
    for p in paths:
        try:
            with Image.open(p) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        except OSError as exc:
            raise OSError(f"cannot read frame {p}: {exc}") from exc
        frames.append(arr.transpose(2, 0, 1))
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"frames in {frame_dir} have different sizes: {sorted(shapes)}")
    return np.stack(frames)


def write_frames(frames, out_dir) -> list[Path]:
    """Clip to [0, 1], quantize to 8 bits and write ``%06d.png``."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(np.asarray(frames)):
        img = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
        path = out_dir / f"{i:06d}.png"
        Image.fromarray(img).save(path)
        paths.append(path)
    return paths


def write_clip(clip: ClipRecord, out_dir) -> Path:
    """Layout: ``hr/%06d.png``, ``lr/%06d.png``, ``events.evt1``, ``meta.json``.

    ``lr/`` is written as an inference input only; loading recomputes it from ``hr/``.
    """
    out_dir = Path(out_dir)
    write_frames(clip.hr_frames, out_dir / "hr")
    write_frames(clip.lr_frames, out_dir / "lr")
    events = clip.events
    if events is None:
        raise ValueError("clip has no unsplit event stream to write")
    write_evt1(events, out_dir / "events.evt1")
    meta = {"fps": clip.fps, "scale": clip.scale, "name": clip.name, "bins": clip.lr_voxels[0].B}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2))
    return out_dir


def ingest_clip(frame_dir, event_file, scale: int = 4, bins: int = 5, fps: float = 30.0,
                name: str | None = None) -> ClipRecord:
    """Load HR frames and their event stream from disk and build a ClipRecord.

    Frames are assumed to sit at t = i / fps. Intervals without events get a
    zero voxel grid and a warning.
    """
    frame_dir = Path(frame_dir)
    hr = read_frames(frame_dir)
    events = read_events(event_file)
    if (events.width, events.height) != (hr.shape[-1], hr.shape[-2]):
        raise ValueError(f"event sensor {events.width}x{events.height} does not match "
                         f"{hr.shape[-1]}x{hr.shape[-2]} frames")
    ts = frame_timestamps(len(hr), fps)
    outside = np.count_nonzero((events.t < ts[0]) | (events.t > ts[-1]))
    if outside:
        logger.warning("%d events fall outside the frame time span and are ignored", outside)
    return build_clip(hr, scale, bins, SimulatorConfig(), fps, name or frame_dir.parent.name, events=events)


def load_clip_dir(clip_dir, scale: int | None = None, bins: int | None = None) -> ClipRecord:
    """Ingest a directory written by ``write_clip``."""
    clip_dir = Path(clip_dir)
    meta_path = clip_dir / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read {meta_path}: {exc}") from exc
    return ingest_clip(clip_dir / "hr", clip_dir / "events.evt1", scale or meta["scale"],
                       bins or meta.get("bins", 5), meta["fps"], meta.get("name", clip_dir.name))
