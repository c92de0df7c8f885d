"""Shared 2D feature extractor and the monocular depth branch."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

DEPTH_CHANNELS = 32


@dataclass(frozen=True)
class BackboneConfig:
    base_channels: int = 52
    initial_kernel_sizes: Tuple[int, int, int] = (9, 7, 5)
    num_mbconv_blocks: int = 4
    feature_channels: int = 128
    expansion: int = 4
    downsample_factor: int = 4

    def __post_init__(self):
        if any(k % 2 == 0 for k in self.initial_kernel_sizes):
            raise ValueError("initial kernel sizes must be odd")
        if self.downsample_factor != 4:
            raise ValueError("downsample_factor is fixed at 4")
        if self.num_mbconv_blocks < 1:
            raise ValueError("need at least one MBConv block")
        object.__setattr__(self, "initial_kernel_sizes", tuple(self.initial_kernel_sizes))

    @property
    def low_channels(self) -> int:
        """Width of the first MBConv block, i.e. of the depth-branch input."""
        return 2 * self.base_channels

    def block_channels(self):
        c = self.base_channels
        n = self.num_mbconv_blocks
        widths = [2 * c, 3 * c, 4 * c] + [self.feature_channels] * max(0, n - 3)
        widths = widths[:n]
        widths[-1] = self.feature_channels
        return widths

    def to_dict(self) -> dict:
        return asdict(self)


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def conv_bn_act(cin, cout, k, stride=1, groups=1, act=True):
    layers = [nn.Conv2d(cin, cout, k, stride, k // 2, groups=groups, bias=False), nn.BatchNorm2d(cout)]
    if act:
        layers.append(nn.SiLU())
    return nn.Sequential(*layers)


class SqueezeExcite(nn.Module):
    def __init__(self, channels, reduced):
        super().__init__()
        self.reduce = nn.Conv2d(channels, reduced, 1)
        self.expand = nn.Conv2d(reduced, channels, 1)

    def forward(self, x):
        s = x.mean((2, 3), keepdim=True)
        s = self.expand(F.silu(self.reduce(s)))
        return x * torch.sigmoid(s)


class MBConv(nn.Module):
    """Inverted residual block: 1x1 expand, depthwise kxk, squeeze-excitation, 1x1 project."""

    def __init__(self, cin, cout, stride=1, expansion=4, kernel_size=3):
        super().__init__()
        hidden = cin * expansion
        self.expand = conv_bn_act(cin, hidden, 1) if expansion != 1 else nn.Identity()
        self.depthwise = conv_bn_act(hidden, hidden, kernel_size, stride, groups=hidden)
        self.se = SqueezeExcite(hidden, max(1, cin // 4))
        self.project = conv_bn_act(hidden, cout, 1, act=False)
        self.residual = stride == 1 and cin == cout

    def forward(self, x):
        out = self.project(self.se(self.depthwise(self.expand(x))))
        return x + out if self.residual else out


class FeatureExtractor(nn.Module):
    """Stem of three large-kernel convs followed by stacked MBConv blocks, output at 1/4."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.base_channels
        k1, k2, k3 = cfg.initial_kernel_sizes
        self.stem = nn.Sequential(
            conv_bn_act(3, c, k1, stride=2),
            conv_bn_act(c, c, k2),
            conv_bn_act(c, c + c // 2, k3),
        )
        widths = cfg.block_channels()
        blocks, cin = [], c + c // 2
        for i, cout in enumerate(widths):
            blocks.append(MBConv(cin, cout, stride=2 if i == 0 else 1, expansion=cfg.expansion))
            cin = cout
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        """Returns (features [B, feature_channels, H/4, W/4], low-level features of block 1)."""
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"input size {h}x{w} must be divisible by 4")
        x = self.stem(x)
        low = None
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if i == 0:
                low = x
        return x, low


class DepthBranch(nn.Module):
    """Three same-resolution MBConv blocks mapping low-level features to 32 depth logits."""

    def __init__(self, cin, expansion=4):
        super().__init__()
        self.blocks = nn.Sequential(
            MBConv(cin, cin, expansion=expansion),
            MBConv(cin, cin, expansion=expansion),
            MBConv(cin, DEPTH_CHANNELS, expansion=expansion),
        )

    def forward(self, low):
        return self.blocks(low)


def extract_features(extractor: FeatureExtractor, left, right):
    """Run both views through the same weights; returns (F_l, F_r, F_low of the left view)."""
    if left.shape != right.shape:
        raise ValueError("left and right images must share a shape")
    b = left.shape[0]
    feats, low = extractor(torch.cat([left, right], 0))
    return feats[:b], feats[b:], low[:b]


def depth_channel_values(dtype=torch.float32, device=None):
    return torch.arange(DEPTH_CHANNELS, dtype=dtype, device=device) / (DEPTH_CHANNELS - 1)


def regress_depth(f_att: torch.Tensor, size=None) -> torch.Tensor:
    """Full-resolution normalized depth from 32-channel depth logits.

    Logits are bilinearly upsampled to ``size`` (default 4x), softmaxed over channels,
    and reduced to the expectation of c/31. Output is [B, H, W] in [0, 1].
    """
    if f_att.shape[1] != DEPTH_CHANNELS:
        raise ValueError(f"expected {DEPTH_CHANNELS} channels, got {f_att.shape[1]}")
    if size is None:
        size = (f_att.shape[2] * 4, f_att.shape[3] * 4)
    if tuple(size) != tuple(f_att.shape[2:]):
        f_att = F.interpolate(f_att, size=size, mode="bilinear", align_corners=False)
    prob = torch.softmax(f_att, dim=1)
    z = depth_channel_values(f_att.dtype, f_att.device).view(1, -1, 1, 1)
    return (prob * z).sum(1)
