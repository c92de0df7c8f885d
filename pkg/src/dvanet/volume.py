"""Cost volume construction, attention filtering, 3D aggregation and disparity regression.

Volumes are laid out [B, C, D, H, W] at quarter resolution. Quarter-resolution
disparity index j stands for 4j pixels; full-resolution index i for i pixels.
"""
from __future__ import annotations

from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

VOLUME_CHANNELS = 32


def build_discrepancy_volume(left: torch.Tensor, right: torch.Tensor, max_disp_q: int) -> torch.Tensor:
    """C[:, :, d, y, x] = left[..., y, x] - right[..., y, x - d]; zero where x < d."""
    if left.shape != right.shape:
        raise ValueError("feature maps must share a shape")
    w = left.shape[-1]
    if not 1 <= max_disp_q <= w:
        raise ValueError(f"max_disp_q={max_disp_q} must be in [1, width={w}]")
    slices = [left - right]
    for d in range(1, max_disp_q):
        slices.append(F.pad(left[..., d:] - right[..., : w - d], (d, 0)))
    return torch.stack(slices, dim=2)


def build_correlation_volume(left: torch.Tensor, right: torch.Tensor, max_disp_q: int,
                             groups: int = VOLUME_CHANNELS) -> torch.Tensor:
    """Group-wise correlation volume (mean of per-group products), for ablations."""
    if left.shape != right.shape:
        raise ValueError("feature maps must share a shape")
    b, c, h, w = left.shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    if not 1 <= max_disp_q <= w:
        raise ValueError(f"max_disp_q={max_disp_q} must be in [1, width={w}]")

    def corr(a, b_):
        return (a * b_).view(b, groups, c // groups, h, -1).mean(2)

    slices = [corr(left, right)]
    for d in range(1, max_disp_q):
        slices.append(F.pad(corr(left[..., d:], right[..., : w - d]), (d, 0)))
    return torch.stack(slices, dim=2)


def group_reduce(volume: torch.Tensor, groups: int = VOLUME_CHANNELS) -> torch.Tensor:
    """Average contiguous channel groups: [B, C, ...] -> [B, groups, ...]."""
    b, c = volume.shape[:2]
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    return volume.view(b, groups, c // groups, *volume.shape[2:]).mean(2)


def apply_hierarchy_attention(volume: torch.Tensor, f_att: torch.Tensor,
                              return_weights: bool = False):
    """Gate each channel by sigmoid(f_att), broadcast over disparities."""
    if f_att.dim() != 4 or f_att.shape[:2] != volume.shape[:2] or f_att.shape[2:] != volume.shape[3:]:
        raise ValueError(f"attention {tuple(f_att.shape)} incompatible with volume {tuple(volume.shape)}")
    a_c = torch.sigmoid(f_att)
    out = volume * a_c.unsqueeze(2)
    return (out, a_c) if return_weights else out


def apply_disparity_attention(volume: torch.Tensor, a_d: torch.Tensor) -> torch.Tensor:
    """Scale every channel by the per-disparity attention a_d [B, 1, D, H, W]."""
    if a_d.dim() != 5 or a_d.shape[1] != 1 or a_d.shape[0] != volume.shape[0] \
            or a_d.shape[2:] != volume.shape[2:]:
        raise ValueError(f"attention {tuple(a_d.shape)} incompatible with volume {tuple(volume.shape)}")
    return volume * a_d


def disparity_attention(logits: torch.Tensor) -> torch.Tensor:
    """Softmax of single-channel [B, 1, D, H, W] logits over the disparity axis."""
    return torch.softmax(logits, dim=2)


def disparity_upsample_matrix(d_q: int, scale: int = 4, dtype=torch.float32, device=None) -> torch.Tensor:
    """Linear interpolation weights [D, d_q] sampling quarter index j at full index 4j.

    Full index i reads position i/scale on the quarter grid, clamped to the last sample.
    """
    d = d_q * scale
    pos = (torch.arange(d, dtype=torch.float64) / scale).clamp(max=d_q - 1)
    lo = pos.floor().long()
    hi = (lo + 1).clamp(max=d_q - 1)
    frac = pos - lo
    m = torch.zeros(d, d_q, dtype=torch.float64)
    m[torch.arange(d), lo] += 1 - frac
    m[torch.arange(d), hi] += frac
    return m.to(dtype=dtype, device=device)


def upsample_logits(logits: torch.Tensor, d_max: int, size=None) -> torch.Tensor:
    """Trilinear upsampling of [B, 1, D/4, H/4, W/4] logits to [B, D, H, W]."""
    if d_max % 4:
        raise ValueError(f"d_max={d_max} must be divisible by 4")
    if logits.dim() != 5 or logits.shape[1] != 1:
        raise ValueError(f"expected [B, 1, D, H, W] logits, got {tuple(logits.shape)}")
    d_q = logits.shape[2]
    if d_q * 4 != d_max:
        raise ValueError(f"logits carry {d_q} disparities, expected {d_max // 4}")
    if size is None:
        size = (logits.shape[3] * 4, logits.shape[4] * 4)
    m = disparity_upsample_matrix(d_q, 4, logits.dtype, logits.device)
    x = torch.einsum("ij,bjhw->bihw", m, logits[:, 0])
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def soft_argmin(logits: torch.Tensor) -> torch.Tensor:
    """Expected disparity under softmax over dim 1 of [B, D, H, W] logits."""
    prob = torch.softmax(logits, dim=1)
    disp = torch.arange(logits.shape[1], dtype=logits.dtype, device=logits.device).view(1, -1, 1, 1)
    return (prob * disp).sum(1)


def regress_disparity(volume_logits: torch.Tensor, d_max: int, size=None) -> torch.Tensor:
    """Interpolate quarter-resolution logits, softmax over disparity, soft-argmin -> [B, H, W] px."""
    return soft_argmin(upsample_logits(volume_logits, d_max, size))


def conv3d_bn(cin, cout, stride=1, act=True):
    layers = [nn.Conv3d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm3d(cout)]
    if act:
        layers.append(nn.LeakyReLU(0.1))
    return nn.Sequential(*layers)


class Hourglass(nn.Module):
    """Two stride-2 encoder stages, two transposed-conv decoder stages, 1x1x1 skips."""

    def __init__(self, channels: int, widths: Tuple[int, int] = (64, 128)):
        super().__init__()
        w1, w2 = widths
        self.down1 = nn.Sequential(conv3d_bn(channels, w1, 2), conv3d_bn(w1, w1))
        self.down2 = nn.Sequential(conv3d_bn(w1, w2, 2), conv3d_bn(w2, w2))
        self.up2 = nn.Sequential(nn.ConvTranspose3d(w2, w1, 3, 2, 1, output_padding=1, bias=False),
                                 nn.BatchNorm3d(w1))
        self.up1 = nn.Sequential(nn.ConvTranspose3d(w1, channels, 3, 2, 1, output_padding=1, bias=False),
                                 nn.BatchNorm3d(channels))
        self.skip1 = nn.Sequential(nn.Conv3d(channels, channels, 1, bias=False), nn.BatchNorm3d(channels))
        self.skip2 = nn.Sequential(nn.Conv3d(w1, w1, 1, bias=False), nn.BatchNorm3d(w1))

    def forward(self, x):
        if any(s % 4 for s in x.shape[2:]):
            raise ValueError(f"volume dims {tuple(x.shape[2:])} must be divisible by 4")
        c1 = self.down1(x)
        c2 = self.down2(c1)
        u2 = F.leaky_relu(self.up2(c2) + self.skip2(c1), 0.1)
        return F.leaky_relu(self.up1(u2) + self.skip1(x), 0.1)


class Aggregation(nn.Module):
    """Two 3D conv blocks, one hourglass, two 3D conv blocks; shape preserving."""

    def __init__(self, channels: int = VOLUME_CHANNELS, widths=(64, 128)):
        super().__init__()
        self.pre = nn.Sequential(conv3d_bn(channels, channels), conv3d_bn(channels, channels))
        self.hourglass = Hourglass(channels, widths)
        self.post = nn.Sequential(conv3d_bn(channels, channels), conv3d_bn(channels, channels))

    def forward(self, volume):
        if volume.shape[1] != self.pre[0][0].in_channels:
            raise ValueError(f"expected {self.pre[0][0].in_channels} channels, got {volume.shape[1]}")
        return self.post(self.hourglass(self.pre(volume)))


class RegressionHead(nn.Module):
    """Two 3D conv blocks, hourglass, one block, then a 1-channel projection (logits)."""

    def __init__(self, channels: int = VOLUME_CHANNELS, widths=(64, 128)):
        super().__init__()
        self.pre = nn.Sequential(conv3d_bn(channels, channels), conv3d_bn(channels, channels))
        self.hourglass = Hourglass(channels, widths)
        self.post = conv3d_bn(channels, channels)
        self.proj = nn.Conv3d(channels, 1, 3, 1, 1, bias=False)

    def forward(self, volume):
        if volume.shape[1] != self.pre[0][0].in_channels:
            raise ValueError(f"expected {self.pre[0][0].in_channels} channels, got {volume.shape[1]}")
        return self.proj(self.post(self.hourglass(self.pre(volume))))


class DisparityAttentionBranch(nn.Module):
    """Four 3D convs and one hourglass reducing C_agg to a single-channel volume.

    Returns (A_d [B, 1, D/4, H/4, W/4], D_0 [B, H, W], logits).
    """

    def __init__(self, d_max: int, channels: int = VOLUME_CHANNELS, widths=(64, 128)):
        super().__init__()
        self.d_max = d_max
        self.head = RegressionHead(channels, widths)

    def forward(self, c_agg, size=None):
        logits = self.head(c_agg)
        a_d = disparity_attention(logits)
        d0 = regress_disparity(logits, self.d_max, size)
        return a_d, d0, logits
