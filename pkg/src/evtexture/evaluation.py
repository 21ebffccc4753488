"""PSNR/SSIM metrics, texture-magnitude scoring and temporal profiles."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate, correlate1d

logger = logging.getLogger(__name__)

LEVELS = ("easy", "medium", "hard")
# Midpoints between the easy/medium/hard corpus means, used when a clip is
# scored on its own rather than ranked inside a corpus.
LEVEL_THRESHOLDS = (0.24, 0.405)
BUCKET_FRACTIONS = (0.5, 0.8)

REPORT_SCHEMA = {
    "type": "object",
    "required": ["clip", "psnr", "ssim", "per_frame", "texture_magnitude", "level"],
    "properties": {
        "clip": {"type": "string"},
        "psnr": {"anyOf": [{"type": "number"}, {"enum": ["inf"]}]},
        "ssim": {"type": "number", "minimum": -1, "maximum": 1},
        "per_frame": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["frame", "psnr", "ssim"],
                "properties": {
                    "frame": {"type": "integer", "minimum": 0},
                    "psnr": {"anyOf": [{"type": "number"}, {"enum": ["inf"]}]},
                    "ssim": {"type": "number", "minimum": -1, "maximum": 1},
                },
            },
        },
        "texture_magnitude": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "level": {"enum": [*LEVELS, None]},
        "mode": {"enum": ["Y", "RGB"]},
        "border": {"type": "integer", "minimum": 0},
    },
}


def _as_chw(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[None]
    if img.ndim != 3:
        raise ValueError(f"expected a (3, H, W) or (H, W) image, got shape {img.shape}")
    return img


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 luma with the 16-235 offset, on the [0, 1] scale. (3, H, W) -> (1, H, W)."""
    r, g, b = img[0], img[1], img[2]
    return ((65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0)[None]


def _prepare(pred, gt, mode, border):
    pred, gt = _as_chw(pred), _as_chw(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if mode not in ("Y", "RGB"):
        raise ValueError(f"mode must be 'Y' or 'RGB', got {mode!r}")
    if border:
        if 2 * border >= min(pred.shape[-2:]):
            raise ValueError(f"border {border} leaves nothing of a {pred.shape[-2:]} image")
        pred = pred[:, border:-border, border:-border]
        gt = gt[:, border:-border, border:-border]
    if mode == "Y" and pred.shape[0] == 3:
        pred, gt = rgb_to_y(pred), rgb_to_y(gt)
    return pred, gt


def psnr(pred, gt, mode: str = "RGB", border: int = 0) -> float:
    """PSNR in dB with peak 1. Identical inputs give ``math.inf``."""
    pred, gt = _prepare(pred, gt, mode, border)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _ssim_channel(x, y, window, c1, c2):
    r = len(window) // 2

    def filt(a):
        a = correlate1d(a, window, axis=0, mode="reflect")
        return correlate1d(a, window, axis=1, mode="reflect")[r:-r, r:-r]

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(pred, gt, mode: str = "RGB", border: int = 0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM, Gaussian window, peak 1; averaged over channels."""
    pred, gt = _prepare(pred, gt, mode, border)
    if min(pred.shape[-2:]) < win_size:
        raise ValueError(f"image {pred.shape[-2:]} is smaller than the {win_size}x{win_size} window")
    window = gaussian_kernel(win_size, sigma)
    c1, c2 = 0.01**2, 0.03**2
    return float(np.mean([_ssim_channel(p, g, window, c1, c2) for p, g in zip(pred, gt)]))


def _json_number(v: float):
    return "inf" if math.isinf(v) else v


@dataclass
class MetricReport:
    per_frame: list[tuple[float, float]]
    channel_mode: str = "Y"
    border_crop: int = 0
    clip: str = ""

    @property
    def clip_mean(self) -> tuple[float, float]:
        ps = [p for p, _ in self.per_frame]
        mean_psnr = math.inf if any(math.isinf(p) for p in ps) else float(np.mean(ps))
        return mean_psnr, float(np.mean([s for _, s in self.per_frame]))

    def to_dict(self, texture_magnitude: float | None = None, level: str | None = None) -> dict:
        mean_psnr, mean_ssim = self.clip_mean
        return {
            "clip": self.clip,
            "psnr": _json_number(mean_psnr),
            "ssim": mean_ssim,
            "per_frame": [{"frame": i, "psnr": _json_number(p), "ssim": s}
                          for i, (p, s) in enumerate(self.per_frame)],
            "texture_magnitude": texture_magnitude,
            "level": level,
            "mode": self.channel_mode,
            "border": self.border_crop,
        }


def evaluate_clip(pred_frames, gt_frames, mode: str = "Y", border: int = 0, clip: str = "") -> MetricReport:
    """Per-frame PSNR/SSIM over two (T, 3, H, W) sequences."""
    if len(pred_frames) != len(gt_frames):
        raise ValueError(f"{len(pred_frames)} predicted frames vs {len(gt_frames)} ground-truth frames")
    if len(pred_frames) == 0:
        raise ValueError("no frames to evaluate")
    per_frame = [(psnr(p, g, mode, border), ssim(p, g, mode, border)) for p, g in zip(pred_frames, gt_frames)]
    return MetricReport(per_frame, mode, border, clip)


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, REPORT_SCHEMA)


# -- texture magnitude -------------------------------------------------------

@dataclass
class TextureReport:
    magnitude: float
    per_frame_contrast: list[float] = field(default_factory=list)
    level: str = "easy"
    clamped: bool = False


def luma(frames) -> np.ndarray:
    """(T, 3, H, W) or (T, H, W) -> (T, H, W)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4 and frames.shape[1] == 3:
        return 0.299 * frames[:, 0] + 0.587 * frames[:, 1] + 0.114 * frames[:, 2]
    if frames.ndim == 4 and frames.shape[1] == 1:
        return frames[:, 0]
    if frames.ndim == 3:
        return frames
    raise ValueError(f"expected (T, 3, H, W) or (T, H, W) frames, got shape {frames.shape}")


def level_for(magnitude: float, thresholds=LEVEL_THRESHOLDS) -> str:
    lo, hi = thresholds
    return "easy" if magnitude < lo else "medium" if magnitude < hi else "hard"


def texture_magnitude(frames, alpha: float = 10.0, ksize: int = 5, sigma: float = 1.5) -> TextureReport:
    """alpha times the mean over frames of the RMS difference between each
    frame and its Gaussian blur, clamped to [0, 1]."""
    gray = luma(frames)
    if gray.shape[0] == 0:
        raise ValueError("texture magnitude needs at least one frame")
    k1 = gaussian_kernel(ksize, sigma)
    kernel = np.outer(k1, k1)
    contrast = []
    for frame in gray:
        # centring first keeps constant frames exactly zero under rounding
        frame = frame - frame.mean()
        blurred = correlate(frame, kernel, mode="mirror")
        contrast.append(float(np.sqrt(np.mean((frame - blurred) ** 2))))
    raw = alpha * float(np.mean(contrast))
    clamped = raw > 1.0
    if clamped:
        logger.warning("texture magnitude %.4f exceeds 1; clamping", raw)
    mag = min(raw, 1.0)
    return TextureReport(mag, contrast, level_for(mag), clamped)


def bucket_levels(magnitudes) -> list[str]:
    """Rank clips by magnitude: lowest 50% easy, next 30% medium, top 20% hard."""
    mags = np.asarray(magnitudes, dtype=np.float64)
    n = len(mags)
    order = np.argsort(mags, kind="stable")
    n_easy, n_medium_end = int(BUCKET_FRACTIONS[0] * n), int(BUCKET_FRACTIONS[1] * n)
    levels = [""] * n
    for rank, idx in enumerate(order):
        levels[idx] = "easy" if rank < n_easy else "medium" if rank < n_medium_end else "hard"
    return levels


# -- temporal profile -------------------------------------------------------

def temporal_profile(frames, column: int) -> np.ndarray:
    """Stack column ``column`` of every frame: (T, 3, H, W) -> (T, H, 3), or (T, H) for grayscale."""
    frames = np.asarray(frames)
    w = frames.shape[-1]
    if not 0 <= column < w:
        raise ValueError(f"column {column} is outside [0, {w})")
    if frames.ndim == 4:
        return np.moveaxis(frames[..., column], 1, -1)
    if frames.ndim == 3:
        return frames[..., column]
    raise ValueError(f"expected (T, 3, H, W) or (T, H, W) frames, got shape {frames.shape}")


def save_profile(profile: np.ndarray, path) -> None:
    from PIL import Image

    img = np.clip(np.round(np.asarray(profile) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)
