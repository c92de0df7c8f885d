"""Invariant suite behind ``dvanet selftest``.

Each check compares a vectorized code path against a loop-level oracle or an
analytic property. Checks return (passed, detail); ``run_selftest`` collects them.
"""
from __future__ import annotations

import math
import tempfile
import time
from pathlib import Path
from typing import Callable, List, Tuple

import numpy as np
import torch

from . import io as dio
from .backbone import regress_depth
from .geometry import DisparityMap, StereoCalibration, depth_to_disparity, disparity_to_depth
from .metrics import (
    BinnedErrorCurve,
    WrdeConfig,
    bin_errors,
    d1_rate,
    epe,
    pixel_error_rate,
    relative_depth_error,
    wrde,
    wrde_weights,
)
from .model import DVANet, ModelConfig
from .training import generate_synthetic_scene, set_deterministic
from .volume import build_discrepancy_volume

CheckResult = Tuple[bool, str]


def _loop_wrde(pred, gt, fb, cfg: WrdeConfig):
    n = int(math.floor((cfg.z_max - cfg.z_min) / cfg.interval + 1e-9))
    sums, counts = [0.0] * n, [0] * n
    for y in range(gt.shape[0]):
        for x in range(gt.shape[1]):
            g, p = gt[y, x], pred[y, x]
            if not (g > 1e-6 and p > 1e-6):
                continue
            z = fb / g
            if z < cfg.z_min or z >= cfg.z_max:
                continue
            i = int((z - cfg.z_min) // cfg.interval)
            if i >= n:
                continue
            sums[i] += abs(1.0 - g / p)
            counts[i] += 1
    bins = [i for i in range(n) if counts[i]]
    total = 0.0
    for i in bins:
        w = cfg.segment_weights[0] if i < n // 3 else cfg.segment_weights[1] if i < 2 * n // 3 \
            else cfg.segment_weights[2]
        total += w / (2 * len(bins)) * sums[i] / counts[i]
    return total


def check_wrde_oracle() -> CheckResult:
    rng = np.random.default_rng(7)
    cfg = WrdeConfig(2.0, 8.0, 0.15)
    calib = StereoCalibration(720.0, 0.12)
    worst = 0.0
    for _ in range(3):
        gt = rng.uniform(calib.fb / 8.5, calib.fb / 1.8, (24, 32))
        pred = gt + rng.normal(0, 0.5, gt.shape)
        pred[rng.random(gt.shape) < 0.05] = 0.0
        rel, m = relative_depth_error(DisparityMap(pred, pred > 0), DisparityMap(gt))
        fast = wrde(bin_errors(disparity_to_depth(DisparityMap(gt), calib), rel, cfg, m), cfg)
        slow = _loop_wrde(pred, gt, calib.fb, cfg)
        worst = max(worst, abs(fast - slow) / abs(slow))
    return worst <= 1e-10, f"max relative difference {worst:.2e}"


def check_wrde_weights() -> CheckResult:
    worst = 0.0
    for n in range(3, 301, 3):
        cfg = WrdeConfig(0.0, float(n), 1.0)
        worst = max(worst, abs(wrde_weights(cfg).sum() - 1.0))
    cfg = WrdeConfig(2.0, 7.85, 0.15)  # 39 bins
    curve = BinnedErrorCurve(np.arange(39.0), np.full(39, 0.02), np.ones(39))
    const_err = abs(wrde(curve, cfg) - 0.02)
    return worst <= 1e-12 and const_err <= 1e-15, f"weight-sum error {worst:.1e}, constant-curve error {const_err:.1e}"


def check_discrepancy_volume() -> CheckResult:
    g = torch.Generator().manual_seed(3)
    left = torch.randn(2, 8, 6, 6, generator=g, dtype=torch.float64)
    right = torch.randn(2, 8, 6, 6, generator=g, dtype=torch.float64)
    vol = build_discrepancy_volume(left, right, 4)
    ref = torch.zeros(2, 8, 4, 6, 6, dtype=torch.float64)
    for b in range(2):
        for d in range(4):
            for y in range(6):
                for x in range(6):
                    if x - d >= 0:
                        ref[b, :, d, y, x] = left[b, :, y, x] - right[b, :, y, x - d]
    return bool(torch.equal(vol, ref)), "exact match" if torch.equal(vol, ref) else "mismatch"


def _fd_rel_error(fn, x, idx, h):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    ana = x.grad.reshape(-1)[idx]
    num = []
    flat = x.detach().reshape(-1)
    for i in idx.tolist():
        xp = flat.clone(); xp[i] += h
        xm = flat.clone(); xm[i] -= h
        with torch.no_grad():
            num.append((fn(xp.view_as(x)) - fn(xm.view_as(x))) / (2 * h))
    num = torch.stack(num)
    return float((ana - num).norm() / num.norm().clamp_min(1e-30))


def check_depth_gradient() -> CheckResult:
    g = torch.Generator().manual_seed(11)
    f_att = torch.randn(1, 32, 2, 2, generator=g, dtype=torch.float64)
    w = torch.randn(1, 8, 8, generator=g, dtype=torch.float64)
    err = _fd_rel_error(lambda t: (regress_depth(t) * w).sum(), f_att, torch.arange(f_att.numel()), 1e-5)
    return err < 1e-4, f"relative error {err:.2e}"


def micro_model(seed=0, **kw) -> DVANet:
    torch.manual_seed(seed)
    return DVANet(ModelConfig.micro(**kw)).double().eval()


def check_end_to_end_gradient() -> CheckResult:
    model = micro_model()
    g = torch.Generator().manual_seed(5)
    left = torch.rand(1, 3, 16, 32, generator=g, dtype=torch.float64)
    right = torch.rand(1, 3, 16, 32, generator=g, dtype=torch.float64)
    idx = torch.randperm(left.numel(), generator=g)[:8]
    err = _fd_rel_error(lambda t: model(t, right).disp.mean(), left, idx, 1e-6)
    return err < 1e-3, f"relative error {err:.2e} over {len(idx)} pixels"


def check_attention_invariants() -> CheckResult:
    model = micro_model()
    g = torch.Generator().manual_seed(9)
    left = torch.rand(2, 3, 16, 32, generator=g, dtype=torch.float64)
    right = torch.rand(2, 3, 16, 32, generator=g, dtype=torch.float64)
    with torch.no_grad():
        out = model(left, right, return_attention=True)
    dmax = model.config.max_disp
    sums = out.disparity_attention.sum(2)
    ok = {
        "A_d sums": bool((sums - 1).abs().max() <= 1e-6),
        "A_c in (0,1)": bool((out.channel_attention > 0).all() and (out.channel_attention < 1).all()),
        "depth in [0,1]": bool((out.depth >= 0).all() and (out.depth <= 1).all()),
        "D_1 in [0,dmax-1]": bool((out.disp >= 0).all() and (out.disp <= dmax - 1).all()),
        "D_0 in [0,dmax-1]": bool((out.disp_prior >= 0).all() and (out.disp_prior <= dmax - 1).all()),
    }
    bad = [k for k, v in ok.items() if not v]
    return not bad, "all hold" if not bad else "violated: " + ", ".join(bad)


def check_metric_fixtures() -> CheckResult:
    # KITTI-quantized (k / 256) disparities make the +1 px offset exact
    gt = np.round(np.linspace(4.0, 60.0, 64 * 48).reshape(48, 64) * 256) / 256
    pred = gt + 1.0
    vals = (epe(pred, gt), pixel_error_rate(pred, gt, 1.0), pixel_error_rate(pred, gt, 2.0), d1_rate(pred, gt))
    bins = WrdeConfig.rsrd().num_bins
    ok = vals == (1.0, 0.0, 0.0, 0.0) and bins == 40
    return ok, f"EPE={vals[0]}, >1px={vals[1]}, >2px={vals[2]}, D1={vals[3]}, RSRD bins={bins}"


def check_geometry_roundtrip() -> CheckResult:
    rng = np.random.default_rng(1)
    d = DisparityMap(rng.uniform(0.5, 200, (16, 16)))
    calib = StereoCalibration(721.0, 0.54)
    back = depth_to_disparity(disparity_to_depth(d, calib), calib)
    err = float(np.max(np.abs(back.values - d.values) / d.values))
    return err <= 1e-9, f"max relative error {err:.1e}"


def check_pfm_roundtrip() -> CheckResult:
    arr = np.random.default_rng(2).standard_normal((5, 7)).astype(np.float32)
    arr[0, 0] = np.inf
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "a.pfm"
        dio.write_pfm(p, arr)
        back, _ = dio.read_pfm(p)
    ok = back.tobytes() == arr.tobytes()
    return ok, "bit-exact" if ok else "mismatch"


def check_synthetic_warp() -> CheckResult:
    s = generate_synthetic_scene("constant", 64, 16, 16, seed=4, d0=6)
    d = 6
    m = s.gt_disparity.valid_mask
    shifted = np.zeros_like(s.left_image)
    shifted[:, :, d:] = s.right_image[:, :, :-d]
    ok = np.array_equal(shifted[:, m], s.left_image[:, m])
    return ok, "exact on valid mask" if ok else "mismatch"


CHECKS: List[Tuple[str, Callable[[], CheckResult]]] = [
    ("wrde_oracle_equivalence", check_wrde_oracle),
    ("wrde_weight_normalization", check_wrde_weights),
    ("discrepancy_volume_bruteforce", check_discrepancy_volume),
    ("depth_regression_gradient", check_depth_gradient),
    ("end_to_end_gradient", check_end_to_end_gradient),
    ("softmax_sigmoid_invariants", check_attention_invariants),
    ("metric_fixtures", check_metric_fixtures),
    ("geometry_roundtrip", check_geometry_roundtrip),
    ("pfm_roundtrip", check_pfm_roundtrip),
    ("synthetic_warp_identity", check_synthetic_warp),
]


def run_selftest(log=print) -> bool:
    set_deterministic(0)
    all_ok = True
    for name, fn in CHECKS:
        t = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # an exception is a failed invariant, not a crash
            ok, detail = False, f"{type(e).__name__}: {e}"
        all_ok &= ok
        log(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t:.2f}s)")
    return all_ok
