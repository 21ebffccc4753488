"""Bidirectional recurrent VSR network with motion and texture branches."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .blocks import ConvResidualBlocks, lrelu, zero_init
from .flow import EventFlowNet, FlowNet, flow_warp
from .ite import DirectTextureModule, ITEModule


@dataclass(frozen=True)
class NetworkConfig:
    channels: int = 16
    scale: int = 4
    bins: int = 5
    context_blocks: int = 2
    updater_blocks: int = 2
    gru_layers: int = 3
    use_event_flow: bool = False
    flow_levels: int = 3
    flow_width: int = 24
    fusion_blocks: int = 2
    # ablation axes
    updater: str = "convgru"
    iterative: bool = True
    residual: bool = True
    use_motion: bool = True
    use_texture: bool = True
    bidirectional: bool = True

    def __post_init__(self):
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if self.channels < 4 or self.channels % 2:
            raise ValueError("channels must be an even number >= 4")
        if self.flow_levels < 1 or self.flow_width < 2 or self.flow_width % 2:
            raise ValueError("flow_levels must be >= 1 and flow_width an even number >= 2")
        if self.updater not in ("convgru", "conv"):
            raise ValueError(f"unknown updater {self.updater!r}")
        if not (self.use_motion or self.use_texture):
            raise ValueError("at least one of the motion and texture branches is required")

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


# Full-width settings; the desk defaults above are much narrower.
FULL_NETWORK = NetworkConfig(channels=64, context_blocks=8, updater_blocks=5, fusion_blocks=5)

VARIANTS = {
    "evtexture": {},
    "model-a": {"use_texture": False},
    "model-b": {"use_motion": False},
    "model-c": {"updater": "conv"},
    "model-d": {"iterative": False},
    "model-e": {"residual": False},
    "model-f": {"bins": 3},
    "model-g": {"bins": 8},
    "evtexture+": {"use_event_flow": True},
}


def variant_config(name: str, base: NetworkConfig | None = None) -> NetworkConfig:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return (base or NetworkConfig()).replace(**VARIANTS[name])


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r)."""
    n, c, h, w = x.shape
    oc = c // (r * r)
    x = x.reshape(n, oc, r, r, h, w).permute(0, 1, 4, 2, 5, 3)
    return x.reshape(n, oc, h * r, w * r)


def bicubic_upsample(frame, scale):
    return F.interpolate(frame, scale_factor=scale, mode="bicubic", align_corners=False)


class Upsampler(nn.Module):
    """Pixel-shuffle reconstruction added onto the bicubic-upsampled frame."""

    def __init__(self, channels, scale):
        super().__init__()
        if scale not in (2, 4):
            raise ValueError(f"unsupported scale {scale}")
        self.scale = scale
        self.stages = nn.ModuleList(
            [nn.Conv2d(channels, channels * 4, 3, 1, 1) for _ in range(int(np.log2(scale)))])
        self.conv_hr = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv_last = zero_init(nn.Conv2d(channels, 3, 3, 1, 1))

    def branch(self, f):
        for conv in self.stages:
            f = lrelu(pixel_shuffle(conv(f), 2))
        return self.conv_last(lrelu(self.conv_hr(f)))

    def forward(self, f, frame):
        return self.branch(f) + bicubic_upsample(frame, self.scale)


class Fusion(nn.Module):
    """Lifts the frame, concatenates it with the branch features, and runs
    residual blocks to give the propagation feature."""

    def __init__(self, channels, num_inputs, num_blocks):
        super().__init__()
        self.lift = nn.Conv2d(3, channels, 3, 1, 1)
        self.trunk = ConvResidualBlocks(channels * (num_inputs + 1), channels, num_blocks)

    def forward(self, frame, *feats):
        return self.trunk(torch.cat([lrelu(self.lift(frame)), *feats], dim=1))


class Propagation(nn.Module):
    """One temporal direction: motion branch, texture branch, fusion."""

    def __init__(self, cfg: NetworkConfig, with_backward_input: bool):
        super().__init__()
        c = cfg.channels
        self.cfg = cfg
        if cfg.use_texture:
            kw = dict(context_blocks=cfg.context_blocks, updater_blocks=cfg.updater_blocks,
                      gru_layers=cfg.gru_layers, updater=cfg.updater, residual=cfg.residual)
            self.ite = ITEModule(c, **kw) if cfg.iterative else DirectTextureModule(c, cfg.bins, **kw)
        if cfg.use_motion and cfg.use_event_flow:
            fuse = nn.Conv2d(2 * c, c, 1)
            with torch.no_grad():
                # starts out passing only the frame-flow path through
                fuse.weight.zero_()
                fuse.bias.zero_()
                fuse.weight[:, c:, 0, 0] = torch.eye(c)
            self.motion_fuse = fuse
        n_inputs = int(cfg.use_motion) + int(cfg.use_texture) + int(with_backward_input)
        self.fusion = Fusion(c, n_inputs, cfg.fusion_blocks)

    def motion(self, feat, flow, event_flow=None):
        aligned = flow_warp(feat, flow)
        if event_flow is None:
            return aligned
        return self.motion_fuse(torch.cat([flow_warp(feat, event_flow), aligned], dim=1))


class EvTexture(nn.Module):
    def __init__(self, cfg: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.cfg = cfg
        if cfg.use_motion:
            self.flownet = FlowNet(cfg.flow_levels, cfg.flow_width)
            if cfg.use_event_flow:
                self.event_flownet = EventFlowNet(cfg.bins)
        if cfg.bidirectional:
            self.backward_prop = Propagation(cfg, with_backward_input=False)
        self.forward_prop = Propagation(cfg, with_backward_input=cfg.bidirectional)
        self.upsampler = Upsampler(cfg.channels, cfg.scale)

    def flow_parameters(self):
        return list(self.flownet.parameters()) if self.cfg.use_motion else []

    def estimate_flow(self, frame_t, frame_prev):
        """F_{t->t-1}: warping frame_prev by it aligns it to frame_t."""
        return self.flownet(frame_t, frame_prev)

    def event_flow(self, voxel):
        if not self.cfg.use_event_flow:
            raise NotImplementedError("event flow is only available with use_event_flow=True")
        return self.event_flownet(voxel)

    def _check_inputs(self, lrs, voxels):
        if lrs.ndim != 5 or lrs.shape[2] != 3:
            raise ValueError(f"frames must be (N, T, 3, H, W), got {tuple(lrs.shape)}")
        n, t, _, h, w = lrs.shape
        if t < 2:
            raise ValueError("need at least two frames")
        if voxels.ndim != 5 or voxels.shape[:2] != (n, t - 1) or voxels.shape[-2:] != (h, w):
            raise ValueError(f"voxels must be (N, T-1, B, H, W) = ({n}, {t - 1}, B, {h}, {w}), "
                             f"got {tuple(voxels.shape)}")
        if voxels.shape[2] != self.cfg.bins:
            raise ValueError(f"voxels have {voxels.shape[2]} bins but the network expects {self.cfg.bins}")

    def _direction(self, prop: Propagation, lrs, voxels, flows, ev_flows, order, feats_b=None, trace=None):
        """Recurrent sweep over timestamps in ``order``.

        ``flows[k]``/``voxels[:, k]`` hold the step from order[k] to order[k+1]
        already oriented for this direction.
        """
        cfg = self.cfg
        n, _, _, h, w = lrs.shape
        frames = lrs[:, order]
        if cfg.use_texture:
            ite = prop.ite
            context = ite.extract_context(frames[:, 1:].flatten(0, 1))
            texture = ite.extract_texture(voxels.flatten(0, 1))
            projected = [p.unflatten(0, (n, len(order) - 1)) for p in ite.updater.project(context, texture)]
        feat = lrs.new_zeros(n, cfg.channels, h, w)
        outs = []
        for k, t in enumerate(order):
            branch = []
            first = k == 0
            if cfg.use_motion:
                branch.append(torch.zeros_like(feat) if first else
                              prop.motion(feat, flows[:, k - 1], None if ev_flows is None else ev_flows[:, k - 1]))
            if cfg.use_texture:
                if first:
                    branch.append(torch.zeros_like(feat))
                else:
                    steps = [] if trace is not None else None
                    branch.append(prop.ite(feat, projected=[p[:, k - 1] for p in projected], trace=steps))
                    if trace is not None:
                        trace.append({"t": t, "f_prev": feat, "f_texture": branch[-1], "deltas": steps})
            extra = [] if feats_b is None else [feats_b[t]]
            feat = prop.fusion(frames[:, k], *extra, *branch)
            outs.append(feat)
        return outs

    def forward(self, lrs: torch.Tensor, voxels: torch.Tensor, trace: dict | None = None) -> torch.Tensor:
        """Super-resolve a clip.

        Args:
            lrs: (N, T, 3, H, W) low-resolution frames.
            voxels: (N, T-1, B, H, W) normalized voxels; entry t spans frames t -> t+1.
            trace: Optional dict; filled with per-timestamp ITE records under
                ``"forward"``/``"backward"``.

        Returns:
            (N, T, 3, scale*H, scale*W) frames.
        """
        self._check_inputs(lrs, voxels)
        cfg = self.cfg
        n, t, _, h, w = lrs.shape
        fwd_flows = bwd_flows = fwd_ev = bwd_ev = None
        if cfg.use_motion:
            cur, prev = lrs[:, 1:].flatten(0, 1), lrs[:, :-1].flatten(0, 1)
            flows = self.flownet(torch.cat([cur, prev]), torch.cat([prev, cur]))
            fwd_flows = flows[: n * (t - 1)].unflatten(0, (n, t - 1))
            bwd_flows = flows[n * (t - 1):].unflatten(0, (n, t - 1)).flip(1)
            if cfg.use_event_flow:
                flat = voxels.flatten(0, 1)
                # the backward sweep sees time-reversed events: reversed bins, flipped polarity
                ev = self.event_flownet(torch.cat([flat, -flat.flip(1)]))
                fwd_ev = ev[: n * (t - 1)].unflatten(0, (n, t - 1))
                bwd_ev = ev[n * (t - 1):].unflatten(0, (n, t - 1)).flip(1)
        tr_f = tr_b = None
        if trace is not None:
            tr_f, tr_b = trace.setdefault("forward", []), trace.setdefault("backward", [])

        feats_b = None
        if cfg.bidirectional:
            order = list(range(t - 1, -1, -1))
            outs = self._direction(self.backward_prop, lrs, voxels.flip(1).flip(2), bwd_flows, bwd_ev,
                                   order, trace=tr_b)
            feats_b = dict(zip(order, outs))
        feats = self._direction(self.forward_prop, lrs, voxels, fwd_flows, fwd_ev, list(range(t)),
                                feats_b=feats_b, trace=tr_f)
        feats = torch.stack(feats, dim=1).flatten(0, 1)
        out = self.upsampler(feats, lrs.flatten(0, 1))
        return out.unflatten(0, (n, t))


def forward_sequence(model: EvTexture, frames, voxels) -> np.ndarray:
    """Numpy convenience wrapper: (T, 3, H, W) frames + T-1 VoxelGrids -> (T, 3, sH, sW)."""
    frames = np.asarray(frames)
    if len(voxels) != len(frames) - 1:
        raise ValueError(f"expected {len(frames) - 1} voxel grids for {len(frames)} frames, got {len(voxels)}")
    if not all(v.normalized for v in voxels):
        raise ValueError("voxel grids must be normalized")
    dtype = next(model.parameters()).dtype
    lr = torch.as_tensor(frames, dtype=dtype)[None]
    vox = torch.as_tensor(np.stack([v.bins for v in voxels]), dtype=dtype)[None]
    with torch.no_grad():
        return model(lr, vox)[0].numpy()
