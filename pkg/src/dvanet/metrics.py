"""Disparity metrics and the depth-binned Weighted Relative Depth Error (WRDE).

Rates are fractions in [0, 1]; presentation layers convert to percent.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .geometry import (
    EPS_DISPARITY,
    DepthMap,
    DisparityMap,
    StereoCalibration,
    disparity_to_depth,
)

# (z_min, z_max, interval) in meters
KITTI_RANGE = (7.0, 50.0, 0.40)
RSRD_RANGE = (2.0, 8.0, 0.15)


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class WrdeConfig:
    z_min: float
    z_max: float
    interval: float
    segment_weights: Tuple[float, float, float] = (1.0, 2.0, 3.0)

    def __post_init__(self):
        if not self.z_min < self.z_max:
            raise MetricError(f"z_min ({self.z_min}) must be < z_max ({self.z_max})")
        if not self.interval > 0:
            raise MetricError("interval must be positive")
        if self.interval > (self.z_max - self.z_min) / 3 + 1e-12:
            raise MetricError("interval too coarse: each of the three segments needs a bin")
        if len(self.segment_weights) != 3 or min(self.segment_weights) <= 0:
            raise MetricError("segment_weights must be three positive numbers")
        object.__setattr__(self, "segment_weights", tuple(float(w) for w in self.segment_weights))

    @classmethod
    def kitti(cls) -> "WrdeConfig":
        return cls(*KITTI_RANGE)

    @classmethod
    def rsrd(cls) -> "WrdeConfig":
        return cls(*RSRD_RANGE)

    @property
    def num_bins(self) -> int:
        # tolerance absorbs representation error, e.g. 6 / 0.15 = 39.99999...
        return int(math.floor((self.z_max - self.z_min) / self.interval + 1e-9))

    def bin_edges(self) -> np.ndarray:
        return self.z_min + self.interval * np.arange(self.num_bins + 1)

    def segment_bounds(self, n_bins: Optional[int] = None) -> Tuple[int, int]:
        """Bin indices where the medium and far thirds start."""
        n = self.num_bins if n_bins is None else n_bins
        return n // 3, (2 * n) // 3

    def segment_of(self, n_bins: Optional[int] = None) -> np.ndarray:
        n = self.num_bins if n_bins is None else n_bins
        b1, b2 = self.segment_bounds(n)
        idx = np.arange(n)
        return np.where(idx < b1, 0, np.where(idx < b2, 1, 2))

    def to_dict(self) -> dict:
        return {"z_min": self.z_min, "z_max": self.z_max, "interval": self.interval,
                "segment_weights": list(self.segment_weights)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "WrdeConfig":
        return cls(float(d["z_min"]), float(d["z_max"]), float(d["interval"]),
                   tuple(d.get("segment_weights", (1.0, 2.0, 3.0))))


@dataclass
class BinnedErrorCurve:
    """Per-bin mean relative depth error. Empty bins hold NaN, never 0."""

    bin_centers: np.ndarray
    mean_errors: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.bin_centers = np.asarray(self.bin_centers, dtype=np.float64)
        self.mean_errors = np.asarray(self.mean_errors, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if not (len(self.bin_centers) == len(self.mean_errors) == len(self.counts)):
            raise MetricError("curve fields must have equal lengths")

    def __len__(self):
        return len(self.bin_centers)

    @property
    def contributing(self) -> np.ndarray:
        return self.counts > 0

    def merge(self, other: "BinnedErrorCurve") -> "BinnedErrorCurve":
        """Pixel-weighted union of two curves over the same bins."""
        if not np.array_equal(self.bin_centers, other.bin_centers):
            raise MetricError("cannot merge curves with different bins")
        counts = self.counts + other.counts
        sums = (np.nan_to_num(self.mean_errors) * self.counts
                + np.nan_to_num(other.mean_errors) * other.counts)
        with np.errstate(invalid="ignore", divide="ignore"):
            means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        return BinnedErrorCurve(self.bin_centers.copy(), means, counts)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_center_m", "mean_rel_err", "count"])
            for c, e, n in zip(self.bin_centers, self.mean_errors, self.counts):
                w.writerow([repr(float(c)), "" if n == 0 else repr(float(e)), int(n)])

    @classmethod
    def from_csv(cls, path) -> "BinnedErrorCurve":
        centers, errs, counts = [], [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["bin_center_m", "mean_rel_err", "count"]:
                raise MetricError(f"{path}: unexpected curve header {reader.fieldnames}")
            for row in reader:
                centers.append(float(row["bin_center_m"]))
                errs.append(float(row["mean_rel_err"]) if row["mean_rel_err"] else np.nan)
                counts.append(int(row["count"]))
        return cls(np.array(centers), np.array(errs), np.array(counts, dtype=np.int64))


@dataclass
class MetricReport:
    epe_px: float
    rate_gt_1px: float
    rate_gt_2px: float
    d1_3px: float
    wrde: Optional[float]
    segment_means: Optional[Tuple[float, float, float]]
    valid_pixel_count: int
    config: WrdeConfig = field(repr=False)
    curve: BinnedErrorCurve = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "epe_px": self.epe_px,
            "rate_gt_1px": self.rate_gt_1px,
            "rate_gt_2px": self.rate_gt_2px,
            "d1_3px": self.d1_3px,
            "wrde": self.wrde,
            "segment_means": list(self.segment_means) if self.segment_means else None,
            "valid_pixel_count": self.valid_pixel_count,
            "wrde_config": self.config.to_dict(),
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_files(cls, json_path, curve_path) -> "MetricReport":
        with open(json_path) as fh:
            d = json.load(fh)
        seg = d.get("segment_means")
        return cls(d["epe_px"], d["rate_gt_1px"], d["rate_gt_2px"], d["d1_3px"], d["wrde"],
                   tuple(seg) if seg else None, d["valid_pixel_count"],
                   WrdeConfig.from_dict(d["wrde_config"]), BinnedErrorCurve.from_csv(curve_path))


def _as_pair(pred, gt):
    if not isinstance(pred, DisparityMap):
        pred = DisparityMap(pred)
    if not isinstance(gt, DisparityMap):
        gt = DisparityMap(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    mask = pred.valid_mask & gt.valid_mask
    if not mask.any():
        raise MetricError("joint valid mask is empty")
    return pred, gt, mask


def epe(pred, gt) -> float:
    pred, gt, m = _as_pair(pred, gt)
    return float(np.abs(pred.values[m] - gt.values[m]).mean())


def pixel_error_rate(pred, gt, threshold_px: float) -> float:
    """Fraction of pixels whose error is strictly larger than ``threshold_px``."""
    if not threshold_px > 0:
        raise MetricError("threshold must be positive")
    pred, gt, m = _as_pair(pred, gt)
    return float((np.abs(pred.values[m] - gt.values[m]) > threshold_px).mean())


def d1_rate(pred, gt, abs_px: float = 3.0, rel: float = 0.05) -> float:
    """KITTI outlier rate: error > ``abs_px`` AND error > ``rel`` * gt."""
    pred, gt, m = _as_pair(pred, gt)
    err = np.abs(pred.values[m] - gt.values[m])
    return float(((err > abs_px) & (err > rel * np.abs(gt.values[m]))).mean())


def relative_depth_error(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel |1 - d_gt / d_pred| and the mask where it is defined."""
    pred, gt, m = _as_pair(pred, gt)
    m = m & (pred.values > EPS_DISPARITY) & (gt.values > EPS_DISPARITY)
    err = np.full(pred.shape, np.nan)
    err[m] = np.abs(1.0 - gt.values[m] / pred.values[m])
    return err, m


def relative_depth_error_from_depth(pred: DepthMap, gt: DepthMap) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel |z_gt - z_pred| / z_gt for metric depth inputs."""
    if pred.shape != gt.shape:
        raise MetricError("shape mismatch")
    m = pred.valid_mask & gt.valid_mask
    err = np.full(gt.shape, np.nan)
    err[m] = np.abs(gt.values[m] - pred.values[m]) / gt.values[m]
    return err, m


def bin_errors(gt_depth: DepthMap, rel_err: np.ndarray, config: WrdeConfig,
               rel_mask: Optional[np.ndarray] = None) -> BinnedErrorCurve:
    rel_err = np.asarray(rel_err, dtype=np.float64)
    if rel_err.shape != gt_depth.shape:
        raise MetricError("rel_err and depth shapes differ")
    n = config.num_bins
    mask = gt_depth.valid_mask & np.isfinite(rel_err)
    if rel_mask is not None:
        mask &= rel_mask
    z = gt_depth.values[mask]
    e = rel_err[mask]
    idx = np.floor((z - config.z_min) / config.interval).astype(np.int64)
    keep = (z >= config.z_min) & (z < config.z_max) & (idx >= 0) & (idx < n)
    counts = np.bincount(idx[keep], minlength=n)
    sums = np.bincount(idx[keep], weights=e[keep], minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    centers = config.z_min + config.interval * (np.arange(n) + 0.5)
    return BinnedErrorCurve(centers, means, counts)


def wrde_weights(config: WrdeConfig, n_bins: Optional[int] = None,
                 n_contributing: Optional[int] = None) -> np.ndarray:
    """Per-bin WRDE weights over a curve of ``n_bins`` bins (default: the config's bin count).

    Near/medium/far thirds get w1/(2N), w2/(2N), w3/(2N), i.e. 1/(2N), 1/N, 3/(2N) for
    the default 1:2:3 weights, where N is the number of contributing bins. Not renormalized
    when N is not a multiple of 3.
    """
    n = config.num_bins if n_bins is None else n_bins
    N = n if n_contributing is None else n_contributing
    return np.asarray(config.segment_weights)[config.segment_of(n)] / (2.0 * N)


def wrde(curve: BinnedErrorCurve, config: WrdeConfig) -> float:
    ok = curve.contributing
    n_ok = int(ok.sum())
    if n_ok < 3:
        raise MetricError(f"WRDE needs at least 3 contributing bins, got {n_ok}")
    w = wrde_weights(config, len(curve), n_ok)
    return float(np.sum(w[ok] * curve.mean_errors[ok]))


def segment_means(curve: BinnedErrorCurve, config: WrdeConfig) -> Tuple[float, float, float]:
    seg = config.segment_of(len(curve))
    out = []
    for s, name in enumerate(("near", "medium", "far")):
        sel = (seg == s) & curve.contributing
        if not sel.any():
            raise MetricError(f"{name} segment has no contributing bins")
        out.append(float(curve.mean_errors[sel].mean()))
    return tuple(out)


def _safe(fn, *args):
    try:
        return fn(*args)
    except MetricError:
        return None


def report_from_counts(abs_err: np.ndarray, gt_vals: np.ndarray, curve: BinnedErrorCurve,
                       config: WrdeConfig, d1_abs: float = 3.0, d1_rel: float = 0.05) -> MetricReport:
    if abs_err.size == 0:
        raise MetricError("no valid pixels")
    return MetricReport(
        epe_px=float(abs_err.mean()),
        rate_gt_1px=float((abs_err > 1.0).mean()),
        rate_gt_2px=float((abs_err > 2.0).mean()),
        d1_3px=float(((abs_err > d1_abs) & (abs_err > d1_rel * np.abs(gt_vals))).mean()),
        wrde=_safe(wrde, curve, config),
        segment_means=_safe(segment_means, curve, config),
        valid_pixel_count=int(abs_err.size),
        config=config,
        curve=curve,
    )


def evaluate_disparity(pred, gt, calib: StereoCalibration, config: WrdeConfig,
                       d1_abs: float = 3.0, d1_rel: float = 0.05) -> MetricReport:
    """All metrics for one prediction. WRDE/segments are None when bins are too sparse."""
    pred, gt, m = _as_pair(pred, gt)
    rel, rel_mask = relative_depth_error(pred, gt)
    curve = bin_errors(disparity_to_depth(gt, calib), rel, config, rel_mask)
    return report_from_counts(np.abs(pred.values[m] - gt.values[m]), gt.values[m], curve,
                              config, d1_abs, d1_rel)


@dataclass
class ComparisonTable:
    rows: List[dict]
    bin_centers: np.ndarray
    curves: Dict[str, np.ndarray]

    def format(self) -> str:
        head = f"{'model':<20} {'rank':>4} {'EPE(px)':>8} {'>1px(%)':>8} {'>2px(%)':>8} " \
               f"{'D1(%)':>7} {'WRDE(%)':>8} {'near(%)':>8} {'med(%)':>8} {'far(%)':>8}"
        lines = [head]
        pct = lambda v: "-" if v is None else f"{100 * v:.3f}"
        for r in self.rows:
            seg = r["segment_means"] or (None, None, None)
            lines.append(
                f"{r['name']:<20} {r['rank']:>4} {r['epe_px']:>8.4f} {pct(r['rate_gt_1px']):>8} "
                f"{pct(r['rate_gt_2px']):>8} {pct(r['d1_3px']):>7} {pct(r['wrde']):>8} "
                f"{pct(seg[0]):>8} {pct(seg[1]):>8} {pct(seg[2]):>8}")
        return "\n".join(lines)

    def to_csv(self, table_path, curves_path) -> None:
        keys = ["name", "rank", "epe_px", "rate_gt_1px", "rate_gt_2px", "d1_3px", "wrde",
                "near", "medium", "far", "valid_pixel_count"]
        with open(table_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for r in self.rows:
                seg = r["segment_means"] or ("", "", "")
                w.writerow([r["name"], r["rank"], r["epe_px"], r["rate_gt_1px"], r["rate_gt_2px"],
                            r["d1_3px"], "" if r["wrde"] is None else r["wrde"], *seg,
                            r["valid_pixel_count"]])
        names = [r["name"] for r in self.rows]
        with open(curves_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_center_m"] + names)
            for i, c in enumerate(self.bin_centers):
                vals = [self.curves[n][i] for n in names]
                w.writerow([repr(float(c))] + ["" if np.isnan(v) else repr(float(v)) for v in vals])


def compare_models(reports: Mapping[str, MetricReport]) -> ComparisonTable:
    """Name-sorted table with a WRDE rank column, plus curves aligned on the shared bins."""
    if not reports:
        raise MetricError("no reports to compare")
    names = sorted(reports)
    cfg = reports[names[0]].config
    centers = reports[names[0]].curve.bin_centers
    for n in names[1:]:
        if reports[n].config != cfg:
            raise MetricError(f"report {n!r} uses a different WRDE config")
        if not np.array_equal(reports[n].curve.bin_centers, centers):
            raise MetricError(f"report {n!r} has different bin centers")
    order = sorted(names, key=lambda n: (reports[n].wrde is None,
                                         reports[n].wrde if reports[n].wrde is not None else 0.0, n))
    rank = {n: i + 1 for i, n in enumerate(order)}
    rows = []
    for n in names:
        r = reports[n].to_dict()
        r.pop("wrde_config")
        r["name"] = n
        r["rank"] = rank[n]
        rows.append(r)
    return ComparisonTable(rows, centers.copy(), {n: reports[n].curve.mean_errors.copy() for n in names})
