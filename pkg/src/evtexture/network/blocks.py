import torch
from torch import nn
from torch.nn import functional as F


def lrelu(x):
    return F.leaky_relu(x, negative_slope=0.1)


@torch.no_grad()
def zero_init(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.zero_()
    return module


@torch.no_grad()
def scale_init(module: nn.Module, scale: float = 0.1) -> nn.Module:
    """Kaiming-normal weights shrunk by ``scale``; biases zeroed."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight)
            m.weight.mul_(scale)
            if m.bias is not None:
                m.bias.zero_()
    return module


def conv3x3(in_ch, out_ch, stride=1):
    return nn.Conv2d(in_ch, out_ch, 3, stride, 1)


class ResidualBlockNoBN(nn.Module):
    """Conv-ReLU-Conv with an identity shortcut and no normalization."""

    def __init__(self, num_feat=64):
        super().__init__()
        self.conv1 = conv3x3(num_feat, num_feat)
        self.conv2 = conv3x3(num_feat, num_feat)
        scale_init(self, 0.1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


def make_layer(block, num_blocks, **kwargs):
    return nn.Sequential(*[block(**kwargs) for _ in range(num_blocks)])


class ConvResidualBlocks(nn.Module):
    """Input conv to ``out_ch`` followed by residual blocks."""

    def __init__(self, in_ch, out_ch, num_blocks):
        super().__init__()
        self.conv = conv3x3(in_ch, out_ch)
        self.blocks = make_layer(ResidualBlockNoBN, num_blocks, num_feat=out_ch)

    def forward(self, x):
        return self.blocks(lrelu(self.conv(x)))


class ConvGRUCell(nn.Module):
    """Convolutional GRU with 3x3 gates.

    z = sigmoid(Wz * [h, x]), r = sigmoid(Wr * [h, x]),
    q = tanh(Wq * [r h, x]), h' = (1 - z) h + z q.

    Each gate conv over [h, x] is stored as an h part and an x part so the x
    contribution can be computed ahead of the recurrence (``project``).
    """

    def __init__(self, hidden_dim, input_dim):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.conv_hzr = conv3x3(hidden_dim, 2 * hidden_dim)
        self.conv_hq = conv3x3(hidden_dim, hidden_dim)
        self.conv_x = nn.Conv2d(input_dim, 3 * hidden_dim, 3, 1, 1, bias=False)

    def project(self, x):
        return self.conv_x(x)

    def gates(self, h, x):
        zr = torch.sigmoid(self.conv_hzr(h) + self.project(x)[:, : 2 * self.hidden_dim])
        return zr.chunk(2, dim=1)

    def step(self, h, xp):
        c = self.hidden_dim
        z, r = torch.sigmoid(self.conv_hzr(h) + xp[:, : 2 * c]).chunk(2, dim=1)
        q = torch.tanh(self.conv_hq(r * h) + xp[:, 2 * c:])
        return (1 - z) * h + z * q

    def forward(self, h, x):
        return self.step(h, self.project(x))


class ConvLayerCell(nn.Module):
    """Ungated stand-in for a GRU cell (plain-conv updater ablation)."""

    def __init__(self, hidden_dim, input_dim):
        super().__init__()
        self.conv_h = conv3x3(hidden_dim, hidden_dim)
        self.conv_x = nn.Conv2d(input_dim, hidden_dim, 3, 1, 1, bias=False)

    def project(self, x):
        return self.conv_x(x)

    def step(self, h, xp):
        return lrelu(self.conv_h(h) + xp)

    def forward(self, h, x):
        return self.step(h, self.project(x))
