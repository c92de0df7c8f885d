"""DVANet assembly and the checkpoint container."""
from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

import torch
import torch.nn as nn

from .backbone import (
    BackboneConfig,
    DepthBranch,
    FeatureExtractor,
    extract_features,
    init_weights,
    regress_depth,
)
from .volume import (
    VOLUME_CHANNELS,
    Aggregation,
    DisparityAttentionBranch,
    RegressionHead,
    apply_disparity_attention,
    apply_hierarchy_attention,
    build_correlation_volume,
    build_discrepancy_volume,
    group_reduce,
    regress_disparity,
)

CHECKPOINT_FORMAT = "dvanet-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    max_disp: int = 192
    volume: str = "discrepancy"
    hierarchy_attention: bool = True
    disparity_attention: bool = True
    hourglass_widths: Tuple[int, int] = (64, 128)

    def __post_init__(self):
        if self.max_disp % 4 or self.max_disp < 4:
            raise ValueError("max_disp must be a positive multiple of 4")
        if self.volume not in ("discrepancy", "correlation"):
            raise ValueError(f"unknown volume type {self.volume!r}")
        if self.backbone.feature_channels % VOLUME_CHANNELS:
            raise ValueError(f"feature_channels must be a multiple of {VOLUME_CHANNELS}")
        object.__setattr__(self, "hourglass_widths", tuple(self.hourglass_widths))

    @classmethod
    def full(cls, max_disp: int = 192, **kw) -> "ModelConfig":
        return cls(BackboneConfig(), max_disp, **kw)

    @classmethod
    def toy(cls, max_disp: int = 16, **kw) -> "ModelConfig":
        return cls(BackboneConfig(base_channels=8, feature_channels=32), max_disp,
                   hourglass_widths=(32, 32), **kw)

    @classmethod
    def micro(cls, max_disp: int = 16, **kw) -> "ModelConfig":
        return cls(BackboneConfig(base_channels=8, feature_channels=32, expansion=2), max_disp,
                   hourglass_widths=(16, 16), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["initial_kernel_sizes"] = list(self.backbone.initial_kernel_sizes)
        d["hourglass_widths"] = list(self.hourglass_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = dict(d.pop("backbone"))
        bb["initial_kernel_sizes"] = tuple(bb["initial_kernel_sizes"])
        d["hourglass_widths"] = tuple(d["hourglass_widths"])
        return cls(BackboneConfig(**bb), **d)


@dataclass
class StereoOutput:
    disp: torch.Tensor                        # D_1 [B, H, W]
    disp_prior: Optional[torch.Tensor]        # D_0 [B, H, W]
    depth: Optional[torch.Tensor]             # normalized depth [B, H, W]
    channel_attention: Optional[torch.Tensor] = None    # A_c [B, 32, H/4, W/4]
    disparity_attention: Optional[torch.Tensor] = None  # A_d [B, 1, D/4, H/4, W/4]


class DVANet(nn.Module):
    def __init__(self, config: ModelConfig = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        widths = config.hourglass_widths
        self.features = FeatureExtractor(config.backbone)
        self.depth_branch = DepthBranch(config.backbone.low_channels, config.backbone.expansion) \
            if config.hierarchy_attention else None
        self.aggregation = Aggregation(VOLUME_CHANNELS, widths)
        self.attention_branch = DisparityAttentionBranch(config.max_disp, VOLUME_CHANNELS, widths) \
            if config.disparity_attention else None
        self.head = RegressionHead(VOLUME_CHANNELS, widths)
        init_weights(self)

    def build_volume(self, f_l, f_r):
        dq = self.config.max_disp // 4
        if self.config.volume == "discrepancy":
            return group_reduce(build_discrepancy_volume(f_l, f_r, dq), VOLUME_CHANNELS)
        return build_correlation_volume(f_l, f_r, dq, VOLUME_CHANNELS)

    def forward(self, left, right, return_attention: bool = False) -> StereoOutput:
        size = tuple(left.shape[-2:])
        f_l, f_r, low = extract_features(self.features, left, right)
        volume = self.build_volume(f_l, f_r)

        depth = a_c = None
        if self.depth_branch is not None:
            f_att = self.depth_branch(low)
            depth = regress_depth(f_att, size)
            volume, a_c = apply_hierarchy_attention(volume, f_att, return_weights=True)

        c_agg = self.aggregation(volume)

        d0 = a_d = None
        if self.attention_branch is not None:
            a_d, d0, _ = self.attention_branch(c_agg, size)
            c_agg = apply_disparity_attention(c_agg, a_d)

        d1 = regress_disparity(self.head(c_agg), self.config.max_disp, size)
        if not return_attention:
            a_c = a_d = None
        return StereoOutput(d1, d0, depth, a_c, a_d)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def save_checkpoint(path, model: DVANet, **extra) -> str:
    """Write weights, config echo and ``extra`` state; returns the payload SHA-256."""
    buf = io.BytesIO()
    torch.save({"config": model.config.to_dict(), "state_dict": model.state_dict(), "extra": extra}, buf)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).hexdigest()
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "sha256": digest, "payload": payload}, path)
    return digest


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path, map_location="cpu"):
    """Returns (model, extra). Raises CheckpointError on format, version or checksum mismatch."""
    try:
        box = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:  # torch surfaces corrupt files as assorted error types
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    if not isinstance(box, dict) or box.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if box.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {box.get('version')}")
    payload = box["payload"]
    if hashlib.sha256(payload).hexdigest() != box["sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    body = torch.load(io.BytesIO(payload), map_location=map_location, weights_only=True)
    model = DVANet(ModelConfig.from_dict(body["config"]))
    model.load_state_dict(body["state_dict"])
    return model, body["extra"]
