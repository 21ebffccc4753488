"""Event streams, ESIM-style simulation from frames, and voxel grids."""
from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .resample import bicubic_downsample

logger = logging.getLogger(__name__)

EVT1_MAGIC = b"EVT1"
EVT1_HEADER = struct.Struct("<4sHHI4x")
EVT1_RECORD = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<f8"), ("p", "i1")])

# Absorbs log-space rounding so a change of exactly k*C yields k events.
CROSSING_TOL = 1e-9


class DegenerateStreamError(ValueError):
    """Raised when all events of a multi-event stream share one timestamp."""


class Event(NamedTuple):
    x: int
    y: int
    t: float
    p: int


@dataclass(frozen=True)
class EventStream:
    """Time-ordered events over a ``width`` x ``height`` sensor.

    Stored column-wise; ``t_start``/``t_end`` bound the observation window.
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    width: int
    height: int
    t_start: float = 0.0
    t_end: float = 0.0

    def __post_init__(self):
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns have different lengths")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise ValueError("events are not sorted by timestamp")
            if np.any((self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height)):
                raise ValueError("event coordinates fall outside the sensor")
            if not np.all(np.abs(self.p) == 1):
                raise ValueError("polarity must be +1 or -1")
            if self.t[0] < self.t_start or self.t[-1] > self.t_end:
                raise ValueError("event timestamps fall outside [t_start, t_end]")

    @classmethod
    def from_arrays(cls, x, y, t, p, width, height, t_start=None, t_end=None, sort=True):
        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        t = np.asarray(t, dtype=np.float64)
        p = np.asarray(p, dtype=np.int8)
        if sort and len(t):
            order = np.argsort(t, kind="stable")
            x, y, t, p = x[order], y[order], t[order], p[order]
        if t_start is None:
            t_start = float(t[0]) if len(t) else 0.0
        if t_end is None:
            t_end = float(t[-1]) if len(t) else t_start
        return cls(x, y, t, p, int(width), int(height), float(t_start), float(t_end))

    @classmethod
    def empty(cls, width, height, t_start=0.0, t_end=0.0):
        return cls.from_arrays([], [], [], [], width, height, t_start, t_end)

    @classmethod
    def from_events(cls, events, width, height, t_start=None, t_end=None):
        cols = list(zip(*events)) if events else ([], [], [], [])
        return cls.from_arrays(*cols, width=width, height=height, t_start=t_start, t_end=t_end)

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for i in range(len(self)):
            yield Event(int(self.x[i]), int(self.y[i]), float(self.t[i]), int(self.p[i]))

    def slice_time(self, t0: float, t1: float, closed: bool = False) -> "EventStream":
        """Events with ``t0 <= t < t1`` (``t <= t1`` when ``closed``)."""
        lo = np.searchsorted(self.t, t0, side="left")
        hi = np.searchsorted(self.t, t1, side="right" if closed else "left")
        sl = slice(lo, hi)
        return EventStream(self.x[sl], self.y[sl], self.t[sl], self.p[sl],
                           self.width, self.height, float(t0), float(t1))

    def flipped_polarity(self) -> "EventStream":
        return EventStream(self.x, self.y, self.t, -self.p, self.width, self.height, self.t_start, self.t_end)

    def shifted(self, dt: float) -> "EventStream":
        return EventStream(self.x, self.y, self.t + dt, self.p, self.width, self.height,
                           self.t_start + dt, self.t_end + dt)

    def hflip(self) -> "EventStream":
        return EventStream(self.width - 1 - self.x, self.y, self.t, self.p,
                           self.width, self.height, self.t_start, self.t_end)


@dataclass(frozen=True)
class VoxelGrid:
    bins: np.ndarray
    normalized: bool = False
    eta: float | None = None

    def __post_init__(self):
        if self.bins.ndim != 3 or self.bins.shape[0] < 1:
            raise ValueError(f"voxel grid must be (B, H, W), got {self.bins.shape}")

    @property
    def B(self) -> int:
        return self.bins.shape[0]

    @property
    def shape(self):
        return self.bins.shape


@dataclass(frozen=True)
class SimulatorConfig:
    contrast_mean: float = 1.0
    contrast_std: float = 0.1
    interp_steps: int = 8
    log_eps: float = 1e-3
    rng_seed: int = 0
    min_contrast: float = 0.01

    def __post_init__(self):
        if self.contrast_mean <= 0:
            raise ValueError("contrast_mean must be positive")
        if self.contrast_std < 0:
            raise ValueError("contrast_std must be non-negative")
        if self.interp_steps < 1:
            raise ValueError("interp_steps must be >= 1")


def to_luma(frames: np.ndarray) -> np.ndarray:
    """(T, 3, H, W) or (T, H, W) -> (T, H, W) luminance in [0, 1]."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        return frames
    if frames.ndim == 4 and frames.shape[1] == 1:
        return frames[:, 0]
    if frames.ndim == 4 and frames.shape[1] == 3:
        return 0.299 * frames[:, 0] + 0.587 * frames[:, 1] + 0.114 * frames[:, 2]
    raise ValueError(f"expected (T, 3, H, W) or (T, H, W) frames, got shape {frames.shape}")


def sample_thresholds(shape, cfg: SimulatorConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.rng_seed)
    c = rng.normal(cfg.contrast_mean, cfg.contrast_std, size=shape)
    return np.maximum(c, cfg.min_contrast)


def simulate_events(frames: np.ndarray, cfg: SimulatorConfig = SimulatorConfig(),
                    fps: float = 30.0, timestamps=None) -> EventStream:
    """Emit events whenever per-pixel log intensity moves a full threshold away
    from its reference level.

    Args:
        frames: (T, 3, H, W) RGB or (T, H, W) grayscale, values in [0, 1].
        cfg: Simulator settings; thresholds are drawn once per pixel.
        fps: Frame rate used when ``timestamps`` is not given.
        timestamps: Optional increasing frame times in seconds.

    Returns:
        EventStream spanning the first to the last frame time.
    """
    frames = np.asarray(frames)
    if frames.ndim not in (3, 4) or frames.shape[0] < 2:
        raise ValueError("need at least two frames to simulate events")
    if not np.all(np.isfinite(frames)):
        raise ValueError("frames contain non-finite values")
    luma = to_luma(frames)
    T, H, W = luma.shape
    if timestamps is None:
        timestamps = np.arange(T, dtype=np.float64) / fps
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if timestamps.shape != (T,) or np.any(np.diff(timestamps) <= 0):
        raise ValueError("timestamps must be strictly increasing, one per frame")

    log_frames = np.log(np.clip(luma, 0.0, None) + cfg.log_eps).reshape(T, -1)
    C = sample_thresholds(H * W, cfg)
    ref = log_frames[0].copy()

    xs, ys, ts, ps = [], [], [], []
    steps = cfg.interp_steps
    for k in range(T - 1):
        L0, L1 = log_frames[k], log_frames[k + 1]
        t0, t1 = timestamps[k], timestamps[k + 1]
        for s in range(steps):
            a0, a1 = s / steps, (s + 1) / steps
            La = L0 + (L1 - L0) * a0
            Lb = L0 + (L1 - L0) * a1
            ta = t0 + (t1 - t0) * a0
            tb = t0 + (t1 - t0) * a1
            diff = Lb - ref
            count = np.floor(np.abs(diff) / C + CROSSING_TOL).astype(np.int64)
            active = np.nonzero(count)[0]
            if active.size == 0:
                continue
            pol = np.sign(diff[active])
            n = count[active]
            pix = np.repeat(active, n)
            # j-th crossing of each pixel: 1..n
            j = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n) + 1
            p_rep = np.repeat(pol, n)
            level = ref[pix] + p_rep * j * C[pix]
            slope = (Lb - La)[pix]
            frac = np.clip((level - La[pix]) / slope, 0.0, 1.0)
            xs.append(pix % W)
            ys.append(pix // W)
            ts.append(ta + (tb - ta) * frac)
            ps.append(p_rep.astype(np.int8))
            ref[active] += pol * n * C[active]

    if not ts:
        return EventStream.empty(W, H, float(timestamps[0]), float(timestamps[-1]))
    return EventStream.from_arrays(np.concatenate(xs), np.concatenate(ys), np.concatenate(ts),
                                   np.concatenate(ps), W, H, float(timestamps[0]), float(timestamps[-1]))


def _time_window(stream: EventStream) -> tuple[float, float]:
    t_first, t_last = float(stream.t[0]), float(stream.t[-1])
    if t_last > t_first:
        return t_first, t_last
    if len(stream) == 1 and stream.t_end > stream.t_start:
        # a lone event is placed relative to the stream window instead
        return stream.t_start, stream.t_end
    raise DegenerateStreamError(f"{len(stream)} events share timestamp {t_first}; cannot voxelize")


def voxelize(stream: EventStream, B: int = 5) -> VoxelGrid:
    """Accumulate polarity into ``B`` temporal bins with a triangular kernel."""
    if B < 2:
        raise ValueError(f"voxelization needs B >= 2, got {B}")
    bins = np.zeros((B, stream.height, stream.width), dtype=np.float64)
    if len(stream) == 0:
        return VoxelGrid(bins, normalized=False)
    t0, t1 = _time_window(stream)
    u = (stream.t - t0) / (t1 - t0) * (B - 1)
    lower = np.clip(np.floor(u).astype(np.int64), 0, B - 1)
    frac = u - lower
    pol = stream.p.astype(np.float64)
    flat = bins.reshape(B, -1)
    pix = stream.y * stream.width + stream.x
    np.add.at(flat, (lower, pix), pol * np.maximum(0.0, 1.0 - frac))
    upper = lower + 1
    ok = upper < B
    np.add.at(flat, (upper[ok], pix[ok]), pol[ok] * np.maximum(0.0, frac[ok]))
    return VoxelGrid(bins, normalized=False)


def normalize_voxel(grid: VoxelGrid, percentile: float = 98.0) -> VoxelGrid:
    """Clip to the 98th percentile of non-zero magnitudes and rescale to [-1, 1]."""
    if grid.normalized:
        raise ValueError("voxel grid is already normalized")
    v = grid.bins
    nonzero = np.abs(v[v != 0])
    if nonzero.size == 0:
        return VoxelGrid(v.copy(), normalized=True, eta=None)
    eta = float(np.percentile(nonzero, percentile))
    return VoxelGrid(np.clip(v, -eta, eta) / eta, normalized=True, eta=eta)


def downsample_voxel(grid: VoxelGrid, scale: int) -> VoxelGrid:
    """Per-bin bicubic downsampling with the same kernel as frame downsampling.

    The cubic kernel can overshoot, so normalized grids are clipped back to [-1, 1].
    """
    out = bicubic_downsample(grid.bins, scale)
    if grid.normalized:
        out = np.clip(out, -1.0, 1.0)
    return VoxelGrid(out, normalized=grid.normalized, eta=grid.eta)


def split_intervals(stream: EventStream, timestamps) -> list[EventStream]:
    """Split at frame times into half-open intervals; the last one is closed."""
    timestamps = np.asarray(timestamps, dtype=np.float64)
    n = len(timestamps) - 1
    return [stream.slice_time(timestamps[i], timestamps[i + 1], closed=(i == n - 1)) for i in range(n)]


def events_to_voxels(stream: EventStream, timestamps, B: int = 5, scale: int = 1) -> list[VoxelGrid]:
    voxels = []
    for i, chunk in enumerate(split_intervals(stream, timestamps)):
        if len(chunk) == 0:
            logger.warning("no events in interval %d [%g, %g); using a zero voxel grid",
                           i, chunk.t_start, chunk.t_end)
        grid = normalize_voxel(voxelize(chunk, B))
        if scale > 1:
            grid = downsample_voxel(grid, scale)
        voxels.append(grid)
    return voxels


# -- serialization ---------------------------------------------------------

def write_evt1(stream: EventStream, path) -> None:
    path = Path(path)
    rec = np.empty(len(stream), dtype=EVT1_RECORD)
    rec["x"], rec["y"], rec["t"], rec["p"] = stream.x, stream.y, stream.t, stream.p
    with open(path, "wb") as fh:
        fh.write(EVT1_HEADER.pack(EVT1_MAGIC, stream.width, stream.height, len(stream)))
        fh.write(rec.tobytes())


def read_evt1(path) -> EventStream:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read event file {path}: {exc}") from exc
    if len(raw) < EVT1_HEADER.size:
        raise ValueError(f"{path}: truncated EVT1 header")
    magic, width, height, count = EVT1_HEADER.unpack_from(raw)
    if magic != EVT1_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = raw[EVT1_HEADER.size:]
    if len(body) != count * EVT1_RECORD.itemsize:
        raise ValueError(f"{path}: expected {count} records, found {len(body) / EVT1_RECORD.itemsize:g}")
    rec = np.frombuffer(body, dtype=EVT1_RECORD)
    return EventStream.from_arrays(rec["x"], rec["y"], rec["t"], rec["p"], width, height, sort=False)


def write_events_csv(stream: EventStream, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "t", "p"])
        for ev in stream:
            w.writerow([ev.x, ev.y, repr(ev.t), ev.p])


def read_events_csv(path, width: int, height: int) -> EventStream:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return EventStream.from_arrays([int(r["x"]) for r in rows], [int(r["y"]) for r in rows],
                                   [float(r["t"]) for r in rows], [int(r["p"]) for r in rows],
                                   width, height)


def read_events(path, width: int | None = None, height: int | None = None) -> EventStream:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        if width is None or height is None:
            raise ValueError("CSV event files need an explicit width and height")
        return read_events_csv(path, width, height)
    return read_evt1(path)


def save_voxel(grid: VoxelGrid, path) -> None:
    """Write ``<path>.npy`` (float32, (B, H, W)) and ``<path>.json``."""
    path = Path(path).with_suffix("")
    np.save(path.with_suffix(".npy"), grid.bins.astype(np.float32))
    meta = {"B": grid.B, "normalized": grid.normalized, "eta": grid.eta}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_voxel(path) -> VoxelGrid:
    path = Path(path).with_suffix("")
    bins = np.load(path.with_suffix(".npy"))
    meta = json.loads(path.with_suffix(".json").read_text())
    if bins.shape[0] != meta["B"]:
        raise ValueError(f"{path}: sidecar says B={meta['B']} but array has {bins.shape[0]} bins")
    return VoxelGrid(bins, normalized=bool(meta["normalized"]), eta=meta["eta"])
