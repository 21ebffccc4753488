"""Optical flow estimation and backward warping."""
import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .blocks import lrelu, zero_init


def flow_warp(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp ``x`` (N, C, H, W) by ``flow`` (N, 2, H, W).

    out[y, x] = x[y + v, x + u] with bilinear sampling and border clamping.
    Channel 0 of ``flow`` is the horizontal displacement u.
    """
    if x.shape[-2:] != flow.shape[-2:] or flow.shape[1] != 2 or x.shape[0] != flow.shape[0]:
        raise ValueError(f"flow {tuple(flow.shape)} does not match feature {tuple(x.shape)}")
    # the check is data-dependent, so it is skipped under torch.func.vmap
    if not torch._C._functorch.is_batchedtensor(flow) and not torch.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")
    _, _, h, w = x.shape
    gy, gx = torch.meshgrid(torch.arange(h, dtype=flow.dtype, device=flow.device),
                            torch.arange(w, dtype=flow.dtype, device=flow.device), indexing="ij")
    sx = gx + flow[:, 0]
    sy = gy + flow[:, 1]
    grid = torch.stack((2.0 * sx / max(w - 1, 1) - 1.0, 2.0 * sy / max(h - 1, 1) - 1.0), dim=-1)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=True)


def resize_flow(flow, size):
    h, w = flow.shape[-2:]
    out = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    return torch.stack((out[:, 0] * (size[1] / w), out[:, 1] * (size[0] / h)), dim=1)


class FlowLevel(nn.Module):
    def __init__(self, width=24):
        super().__init__()
        self.conv1 = nn.Conv2d(8, width, 5, 1, 2)
        self.conv2 = nn.Conv2d(width, width, 3, 1, 1)
        self.conv3 = nn.Conv2d(width, width // 2, 3, 1, 1)
        self.head = zero_init(nn.Conv2d(width // 2, 2, 3, 1, 1))

    def forward(self, x):
        return self.head(lrelu(self.conv3(lrelu(self.conv2(lrelu(self.conv1(x)))))))


class FlowNet(nn.Module):
    """Coarse-to-fine flow pyramid trained from scratch.

    Each level sees [ref, warped supp, upsampled flow] and predicts a residual
    flow in pixels at its own resolution.
    """

    def __init__(self, levels=3, width=24):
        super().__init__()
        self.levels = levels
        self.basic = nn.ModuleList([FlowLevel(width) for _ in range(levels)])

    def forward(self, ref: torch.Tensor, supp: torch.Tensor) -> torch.Tensor:
        """Flow from ``ref`` toward ``supp``: warping supp by it approximates ref."""
        if ref.shape != supp.shape:
            raise ValueError(f"frame shapes differ: {tuple(ref.shape)} vs {tuple(supp.shape)}")
        # fixed whitening, roughly unit variance for natural frames
        refs, supps = [(ref - 0.5) / 0.25], [(supp - 0.5) / 0.25]
        for _ in range(self.levels - 1):
            refs.append(F.avg_pool2d(refs[-1], 2, ceil_mode=True))
            supps.append(F.avg_pool2d(supps[-1], 2, ceil_mode=True))
        flow = None
        for level in range(self.levels - 1, -1, -1):
            r, s = refs[level], supps[level]
            if flow is None:
                flow = r.new_zeros(r.shape[0], 2, *r.shape[-2:])
            else:
                flow = resize_flow(flow, r.shape[-2:])
            inp = torch.cat([r, flow_warp(s, flow), flow], dim=1)
            flow = flow + self.basic[level](inp)
        return flow


class EventFlowNet(nn.Module):
    """Voxel grid (N, B, H, W) -> flow (N, 2, H, W) with a small encoder-decoder."""

    def __init__(self, bins, width=16):
        super().__init__()
        self.enc1 = nn.Conv2d(bins, width, 3, 1, 1)
        self.enc2 = nn.Conv2d(width, 2 * width, 3, 2, 1)
        self.mid = nn.Conv2d(2 * width, 2 * width, 3, 1, 1)
        self.dec = nn.Conv2d(3 * width, width, 3, 1, 1)
        self.head = zero_init(nn.Conv2d(width, 2, 3, 1, 1))

    def forward(self, voxel):
        e1 = lrelu(self.enc1(voxel))
        e2 = lrelu(self.mid(lrelu(self.enc2(e1))))
        up = F.interpolate(e2, size=e1.shape[-2:], mode="bilinear", align_corners=False)
        return self.head(lrelu(self.dec(torch.cat([up, e1], dim=1))))


def _random_texture(rng, n, size, pad):
    from scipy.ndimage import gaussian_filter

    tex = rng.random((n, 3, size + 2 * pad, size + 2 * pad))
    sigma = rng.uniform(1.0, 2.5)
    tex = gaussian_filter(tex, sigma=(0, 0, sigma, sigma), mode="wrap")
    tex -= tex.mean(axis=(2, 3), keepdims=True)
    return 0.5 + 0.2 * tex / tex.std(axis=(2, 3), keepdims=True)


def shifted_pair(rng, n=8, size=32, max_shift=3.0):
    """Random smooth textures and copies translated by a known subpixel shift.

    Returns (frame_t, frame_prev, flow) where frame_t(x) = frame_prev(x - d),
    so the flow that aligns frame_prev to frame_t is -d.
    """
    from scipy.ndimage import map_coordinates

    pad = int(np.ceil(max_shift)) + 2
    tex = _random_texture(rng, n, size, pad)
    d = rng.uniform(-max_shift, max_shift, size=(n, 2))
    yy, xx = np.mgrid[pad:pad + size, pad:pad + size].astype(np.float64)
    prev = tex[:, :, pad:pad + size, pad:pad + size]
    cur = np.empty_like(prev)
    for i in range(n):
        coords = [yy - d[i, 1], xx - d[i, 0]]
        for c in range(3):
            cur[i, c] = map_coordinates(tex[i, c], coords, order=3, mode="wrap")
    flow = np.broadcast_to(-d[:, :, None, None], (n, 2, size, size)).copy()
    return (torch.as_tensor(np.clip(cur, 0, 1), dtype=torch.float32),
            torch.as_tensor(prev, dtype=torch.float32), torch.as_tensor(flow, dtype=torch.float32))


def endpoint_error(pred, gt, crop=0):
    err = torch.linalg.vector_norm(pred - gt, dim=1)
    if crop:
        err = err[..., crop:-crop, crop:-crop]
    return float(err.mean())


def pretrain_flow(flownet: FlowNet, iters=300, size=32, max_shift=3.0, lr=1e-3, seed=0, batch=8):
    """Supervised warm-up of ``flownet`` on synthetic translations.

    Returns the list of per-iteration endpoint errors.
    """
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(flownet.parameters(), lr=lr)
    crop = int(np.ceil(max_shift))
    history = []
    for _ in range(iters):
        cur, prev, gt = shifted_pair(rng, batch, size, max_shift)
        pred = flownet(cur, prev)
        loss = torch.linalg.vector_norm(pred - gt, dim=1)[..., crop:-crop, crop:-crop].mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    return history
