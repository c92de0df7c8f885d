"""Rectified binocular geometry: disparity, depth, normalized depth and point clouds.

All maps carry an explicit validity mask. Sentinel values (0, NaN, negative
disparities) never leak past the constructors below.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

EPS_DISPARITY = 1e-6


@dataclass(frozen=True)
class StereoCalibration:
    focal_length_px: float
    baseline_m: float
    principal_point: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if not (self.focal_length_px > 0):
            raise ValueError(f"focal length must be positive, got {self.focal_length_px}")
        if not (self.baseline_m > 0):
            raise ValueError(f"baseline must be positive, got {self.baseline_m}")

    @property
    def fb(self) -> float:
        return self.focal_length_px * self.baseline_m

    def center(self, shape) -> Tuple[float, float]:
        """Principal point, defaulting to the geometric center of an image of ``shape``."""
        if self.principal_point is not None:
            return tuple(self.principal_point)
        h, w = shape
        return (w - 1) / 2.0, (h - 1) / 2.0

    def to_dict(self) -> dict:
        return {"focal_length_px": self.focal_length_px, "baseline_m": self.baseline_m,
                "principal_point": list(self.principal_point) if self.principal_point else None}

    @classmethod
    def from_dict(cls, d: dict) -> "StereoCalibration":
        pp = d.get("principal_point")
        return cls(float(d["focal_length_px"]), float(d["baseline_m"]), tuple(pp) if pp else None)


def _init_mask(values: np.ndarray, valid_mask) -> np.ndarray:
    finite = np.isfinite(values)
    if valid_mask is None:
        return finite
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if valid_mask.shape != values.shape:
        raise ValueError(f"mask shape {valid_mask.shape} != values shape {values.shape}")
    return valid_mask & finite


@dataclass(frozen=True)
class _Map:
    values: np.ndarray
    valid_mask: np.ndarray = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"expected a 2D map, got shape {values.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid_mask", _init_mask(values, self.valid_mask))

    @property
    def shape(self):
        return self.values.shape

    @property
    def num_valid(self) -> int:
        return int(self.valid_mask.sum())


@dataclass(frozen=True)
class DisparityMap(_Map):
    """Disparity in pixels, d = x_left - x_right >= 0."""

    @classmethod
    def from_raw(cls, values, invalid_value: float = 0.0) -> "DisparityMap":
        """Build from a sentinel-encoded array: ``invalid_value`` and negatives become invalid."""
        values = np.asarray(values, dtype=np.float64)
        mask = np.isfinite(values) & (values != invalid_value)
        negative = mask & (values < 0)
        if negative.any():
            logger.warning("%d negative disparities marked invalid", int(negative.sum()))
        return cls(values, mask & ~negative)


@dataclass(frozen=True)
class DepthMap(_Map):
    """Metric depth in meters; valid values are strictly positive."""

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "valid_mask", self.valid_mask & (np.nan_to_num(self.values) > 0))


@dataclass(frozen=True)
class NormalizedDepthMap(_Map):
    clamp_count: int = field(default=0, compare=False)


def disparity_to_depth(d: DisparityMap, calib: StereoCalibration) -> DepthMap:
    mask = d.valid_mask & (np.nan_to_num(d.values) > EPS_DISPARITY)
    z = np.zeros_like(d.values)
    z[mask] = calib.fb / d.values[mask]
    return DepthMap(z, mask)


def depth_to_disparity(z: DepthMap, calib: StereoCalibration) -> DisparityMap:
    mask = z.valid_mask & np.isfinite(z.values)
    d = np.zeros_like(z.values)
    d[mask] = calib.fb / z.values[mask]
    return DisparityMap(d, mask)


def normalize_depth_labels(d_gt: DisparityMap, d_min: float) -> NormalizedDepthMap:
    """Normalized depth target ``d_min / d_gt``; disparities below ``d_min`` clamp to 1."""
    if not d_min > 0:
        raise ValueError("d_min must be positive")
    mask = d_gt.valid_mask & (np.nan_to_num(d_gt.values) > EPS_DISPARITY)
    out = np.zeros_like(d_gt.values)
    out[mask] = d_min / d_gt.values[mask]
    over = mask & (out > 1.0)
    out[over] = 1.0
    return NormalizedDepthMap(out, mask, clamp_count=int(over.sum()))


def normalize_depth_from_metric(z: DepthMap, z_max: float) -> NormalizedDepthMap:
    if not z_max > 0:
        raise ValueError("z_max must be positive")
    out = np.zeros_like(z.values)
    out[z.valid_mask] = z.values[z.valid_mask] / z_max
    over = z.valid_mask & (out > 1.0)
    out = np.clip(out, 0.0, 1.0)
    return NormalizedDepthMap(out, z.valid_mask, clamp_count=int(over.sum()))


def disparity_to_pointcloud(d: DisparityMap, calib: StereoCalibration) -> np.ndarray:
    """Back-project every valid pixel to an (N, 3) array of (X, Y, Z) in meters, row-major."""
    z = disparity_to_depth(d, calib)
    cx, cy = calib.center(d.shape)
    ys, xs = np.nonzero(z.valid_mask)
    Z = z.values[ys, xs]
    f = calib.focal_length_px
    X = (xs - cx) * Z / f
    Y = (ys - cy) * Z / f
    return np.stack([X, Y, Z], axis=1) if len(Z) else np.zeros((0, 3))
