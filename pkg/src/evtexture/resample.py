"""Separable bicubic resampling shared by frame and voxel downsampling."""
from __future__ import annotations

import numpy as np

CUBIC_A = -0.5  # Catmull-Rom


def cubic_kernel(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    x = np.abs(x)
    out = np.zeros_like(x)
    near = x <= 1.0
    far = (x > 1.0) & (x < 2.0)
    xn, xf = x[near], x[far]
    out[near] = (a + 2.0) * xn**3 - (a + 3.0) * xn**2 + 1.0
    out[far] = a * xf**3 - 5.0 * a * xf**2 + 8.0 * a * xf - 4.0 * a
    return out


def resize_weights(in_size: int, out_size: int) -> np.ndarray:
    """Dense (out_size, in_size) interpolation matrix.

    When shrinking, the kernel is stretched by the scale factor so it also acts
    as the antialiasing prefilter. Taps that fall outside the input are dropped
    and the remaining weights renormalized, so constants are preserved.
    """
    scale = in_size / out_size
    support = max(scale, 1.0)
    centers = (np.arange(out_size) + 0.5) * scale - 0.5
    taps = np.arange(in_size)
    w = cubic_kernel((taps[None, :] - centers[:, None]) / support)
    w /= w.sum(axis=1, keepdims=True)
    return w


def bicubic_resize(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize the last two axes of ``arr`` to ``out_hw``."""
    arr = np.asarray(arr)
    h, w = arr.shape[-2:]
    oh, ow = out_hw
    wy = resize_weights(h, oh)
    wx = resize_weights(w, ow)
    work = arr.astype(np.float64, copy=False)
    out = np.einsum("ij,...jk,lk->...il", wy, work, wx, optimize=True)
    if np.issubdtype(arr.dtype, np.floating):
        return out.astype(arr.dtype, copy=False)
    return out


def bicubic_downsample(arr: np.ndarray, scale: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    if h % scale or w % scale:
        raise ValueError(f"spatial size {h}x{w} is not divisible by scale {scale}")
    return bicubic_resize(arr, (h // scale, w // scale))
