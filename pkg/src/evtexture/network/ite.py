"""Iterative texture enhancement: feature extractors and the GRU updater."""
import torch
from torch import nn
from torch.nn import functional as F

from .blocks import ConvGRUCell, ConvLayerCell, ConvResidualBlocks, ResidualBlockNoBN, lrelu, make_layer, zero_init


class ContextExtractor(ConvResidualBlocks):
    """Frame (N, 3, H, W) -> context feature (N, C, H, W)."""

    def __init__(self, channels, num_blocks):
        super().__init__(3, channels, num_blocks)


class TextureUNet(nn.Module):
    """Five-stage encoder-decoder: two downsampling stages, a bottleneck, two
    upsampling stages with skip connections.

    Inputs whose sides are not multiples of 4 are reflect-padded and the
    output cropped back, so the spatial size is preserved.
    """

    def __init__(self, in_ch, channels):
        super().__init__()
        c = channels
        self.inc = nn.Conv2d(in_ch, c, 3, 1, 1)
        self.down1 = nn.Conv2d(c, c, 3, 2, 1)
        self.down2 = nn.Conv2d(c, 2 * c, 3, 2, 1)
        self.bottleneck = nn.Conv2d(2 * c, 2 * c, 3, 1, 1)
        self.up1 = nn.Conv2d(3 * c, c, 3, 1, 1)
        self.up2 = nn.Conv2d(2 * c, c, 3, 1, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        ph, pw = (-h) % 4, (-w) % 4
        if ph or pw:
            mode = "reflect" if min(h, w) > max(ph, pw) else "replicate"
            x = F.pad(x, (0, pw, 0, ph), mode=mode)
        s0 = lrelu(self.inc(x))
        s1 = lrelu(self.down1(s0))
        s2 = lrelu(self.bottleneck(lrelu(self.down2(s1))))
        u1 = F.interpolate(s2, size=s1.shape[-2:], mode="bilinear", align_corners=False)
        u1 = lrelu(self.up1(torch.cat([u1, s1], dim=1)))
        u2 = F.interpolate(u1, size=s0.shape[-2:], mode="bilinear", align_corners=False)
        out = self.up2(torch.cat([u2, s0], dim=1))
        return out[..., :h, :w]


class TextureUpdater(nn.Module):
    """Hidden-state update G (stacked cells) followed by the delta predictor R.

    ``kind`` selects gated ConvGRU cells or plain conv layers. Every cell sees
    the same input x = [context, texture].
    """

    def __init__(self, channels, gru_layers=3, num_blocks=2, kind="convgru"):
        super().__init__()
        cell = {"convgru": ConvGRUCell, "conv": ConvLayerCell}[kind]
        self.kind = kind
        self.cells = nn.ModuleList([cell(channels, 2 * channels) for _ in range(gru_layers)])
        self.blocks = make_layer(ResidualBlockNoBN, num_blocks, num_feat=channels)
        self.head = zero_init(nn.Conv2d(channels, channels, 3, 1, 1))

    def project(self, context, texture):
        """Input-side gate terms for every bin at once.

        context (M, C, H, W) and texture (M, B, C, H, W) give one tensor per
        cell shaped (M, B, k*C, H, W).
        """
        m, b = texture.shape[:2]
        ctx = context.unsqueeze(1).expand(-1, b, -1, -1, -1)
        x = torch.cat([ctx, texture], dim=2).flatten(0, 1)
        return [cell.project(x).unflatten(0, (m, b)) for cell in self.cells]

    def step(self, h, xps):
        for cell, xp in zip(self.cells, xps):
            h = cell.step(h, xp)
        return h, self.head(self.blocks(h))

    def forward(self, h, x):
        return self.step(h, [cell.project(x) for cell in self.cells])


class _TextureBranch(nn.Module):
    def __init__(self, channels, texture_in, context_blocks, updater_blocks, gru_layers, updater, residual):
        super().__init__()
        self.residual = residual
        self.context_extractor = ContextExtractor(channels, context_blocks)
        self.texture_extractor = TextureUNet(texture_in, channels)
        self.updater = TextureUpdater(channels, gru_layers, updater_blocks, updater)

    def extract_context(self, frame):
        return self.context_extractor(frame)

    def step(self, h_prev, f_prev_iter, context, texture_i):
        """One update: returns (h_new, f_new, delta)."""
        shapes = {tuple(t.shape) for t in (h_prev, f_prev_iter, context, texture_i)}
        if len(shapes) != 1:
            raise ValueError(f"ITE step inputs disagree in shape: {sorted(shapes)}")
        h_new, delta = self.updater(h_prev, torch.cat([context, texture_i], dim=1))
        return h_new, self._advance(f_prev_iter, delta), delta

    def _advance(self, f, delta):
        return f + delta if self.residual else delta

    def forward(self, f_prev, voxel=None, frame=None, context=None, texture=None, projected=None, trace=None):
        """Refine ``f_prev`` with one update per texture slice.

        Args:
            f_prev: (N, C, H, W) propagation feature from the neighbouring timestamp.
            voxel: (N, B, H, W) normalized voxel; only used when nothing is precomputed.
            frame: (N, 3, H, W) current frame; only used when nothing is precomputed.
            context, texture: Optional extractor outputs.
            projected: Optional ``updater.project`` output; skips both extractors.
            trace: Optional list that receives every delta.
        """
        if projected is None:
            if context is None:
                context = self.extract_context(frame)
            if texture is None:
                texture = self.extract_texture(voxel)
            projected = self.updater.project(context, texture)
        h = f = f_prev
        for i in range(projected[0].shape[1]):
            h, delta = self.updater.step(h, [p[:, i] for p in projected])
            f = self._advance(f, delta)
            if trace is not None:
                trace.append(delta)
        return f


class ITEModule(_TextureBranch):
    """Refines a propagation feature once per voxel bin, in bin order.

    Hidden state and feature both start from f_prev. With ``residual`` on,
    f^i = f^{i-1} + delta^i, so the output telescopes to f_prev + sum(delta);
    with it off, each delta replaces the feature. Extractor and updater
    weights are shared by all iterations.
    """

    def __init__(self, channels, context_blocks=2, updater_blocks=2, gru_layers=3,
                 updater="convgru", residual=True):
        super().__init__(channels, 1, context_blocks, updater_blocks, gru_layers, updater, residual)

    def extract_texture(self, voxel):
        """(N, B, H, W) -> (N, B, C, H, W)."""
        n, b, h, w = voxel.shape
        return self.texture_extractor(voxel.reshape(n * b, 1, h, w)).unflatten(0, (n, b))


class DirectTextureModule(_TextureBranch):
    """Non-iterative variant: one UNet over the whole voxel, a single update."""

    def __init__(self, channels, bins, context_blocks=2, updater_blocks=2, gru_layers=3,
                 updater="convgru", residual=True):
        super().__init__(channels, bins, context_blocks, updater_blocks, gru_layers, updater, residual)

    def extract_texture(self, voxel):
        return self.texture_extractor(voxel).unsqueeze(1)
