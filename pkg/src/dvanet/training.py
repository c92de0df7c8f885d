"""Losses, synthetic stereo scenes and a desk-scale training loop."""
from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .geometry import DisparityMap, NormalizedDepthMap, normalize_depth_labels
from .model import DVANet, ModelConfig, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

SCENE_KINDS = ("constant", "ramp", "planar")
TRACE_FIELDS = ("step", "loss_d0", "loss_d1", "loss_dep", "total", "lr")


def set_deterministic(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


# --------------------------------------------------------------------------- losses

def smooth_l1(pred: torch.Tensor, gt: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean smooth-L1 (transition at 1) over ``mask``; masked pixels get zero gradient."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if mask is None:
        mask = torch.ones_like(gt, dtype=torch.bool)
    if not bool(mask.any()):
        raise ValueError("smooth_l1: empty mask")
    x = pred[mask] - gt[mask]
    ax = x.abs()
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5).mean()


def total_loss(losses: Sequence[Optional[torch.Tensor]], state: Optional[Sequence[float]] = None,
               decay: float = 0.99, eps: float = 1e-8):
    """Sum of scale-normalized losses.

    Each normalizer is an EMA of its loss magnitude (seeded with the first value),
    updated before use and treated as a constant for differentiation. ``None`` losses
    are skipped. Returns (total, new_state).
    """
    if not 0 < decay < 1:
        raise ValueError("decay must lie in (0, 1)")
    new_state, total = [], None
    for i, loss in enumerate(losses):
        prev = None if state is None else state[i]
        if loss is None:
            new_state.append(prev)
            continue
        v = float(loss.detach())
        ema = v if prev is None else decay * prev + (1 - decay) * v
        new_state.append(ema)
        term = loss / max(ema, eps)
        total = term if total is None else total + term
    return total, tuple(new_state)


# --------------------------------------------------------------------------- synthetic data

@dataclass
class SyntheticScene:
    left_image: np.ndarray          # [3, H, W] float32 in [0, 1]
    right_image: np.ndarray
    gt_disparity: DisparityMap
    gt_normalized_depth: NormalizedDepthMap
    scene_kind: str
    flat_mask: np.ndarray           # left-view pixels sampled from the texture-less patch


def _texture(rng, h, w):
    img = np.zeros((3, h, w))
    for sigma, amp in ((0.8, 1.0), (2.0, 0.7), (5.0, 0.5)):
        img += amp * ndimage.gaussian_filter(rng.standard_normal((3, h, w)), (0, sigma, sigma))
    img = (img - img.min()) / (img.max() - img.min())
    yy, xx = np.mgrid[:h, :w]
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(h / 12, h / 4)
        color = rng.uniform(0, 1, 3)[:, None]
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[:, blob] = 0.5 * img[:, blob] + 0.5 * color
    return img


def disparity_field(kind: str, width: int, height: int, d_max: int, rng, d0: Optional[float] = None):
    xs = np.arange(width)[None, :].repeat(height, 0).astype(np.float64)
    ys = np.arange(height)[:, None].repeat(width, 1).astype(np.float64)
    hi = d_max - 2.0
    if kind == "constant":
        d = float(rng.integers(2, max(3, int(hi)))) if d0 is None else float(d0)
        return np.full((height, width), d)
    if kind == "ramp":
        a, b = sorted(rng.uniform(1.5, hi, 2))
        return a + (b - a) * xs / (width - 1)
    if kind == "planar":
        lo, top = rng.uniform(1.5, hi / 2), rng.uniform(hi / 2 + 1, hi)
        gx, gy = rng.uniform(0.2, 1.0, 2)
        t = (gx * xs / (width - 1) + gy * ys / (height - 1)) / (gx + gy)
        return lo + (top - lo) * t
    raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")


def _sample_rows(canvas, x):
    """Linear interpolation of canvas[..., y, x[y, j]] along the row axis."""
    w = canvas.shape[-1]
    x = np.clip(x, 0, w - 1)
    x0 = np.floor(x).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    t = x - x0
    rows = np.arange(x.shape[0])[:, None]
    return canvas[..., rows, x0] * (1 - t) + canvas[..., rows, x1] * t


def generate_synthetic_scene(kind: str, width: int, height: int, d_max: int, seed: int,
                             d0: Optional[float] = None, d_min: float = 1.0,
                             flat_region: bool = False) -> SyntheticScene:
    """Textured rectified pair with exact ground truth, d = x_left - x_right.

    The right view is a crop of a wider texture canvas; the left view samples the same
    canvas at x - d(x, y), so right(x - d, y) == left(x, y) wherever x - d >= 0.
    """
    if not d_max < width / 2:
        raise ValueError("d_max must be smaller than half the image width")
    rng = np.random.default_rng(seed)
    disp = disparity_field(kind, width, height, d_max, rng, d0)
    if disp.max() > d_max - 1 or disp.min() < 0:
        raise ValueError(f"disparity range [{disp.min()}, {disp.max()}] exceeds [0, {d_max - 1}]")

    pad = d_max
    canvas = _texture(rng, height, width + pad)
    flat = np.zeros((height, width + pad))
    if flat_region:
        h0, w0 = height // 3, width // 4
        y0, x0 = int(rng.integers(0, height - h0)), int(rng.integers(pad, width + pad - w0))
        flat[y0:y0 + h0, x0:x0 + w0] = 1.0
        canvas[:, y0:y0 + h0, x0:x0 + w0] = rng.uniform(0.3, 0.7, 3)[:, None, None]

    right = canvas[:, :, pad:]
    src = pad + np.arange(width)[None, :] - disp
    left = _sample_rows(canvas, src)
    valid = (np.arange(width)[None, :] - disp) >= 0
    gt = DisparityMap(disp, valid)
    return SyntheticScene(
        left_image=left.astype(np.float32),
        right_image=np.ascontiguousarray(right).astype(np.float32),
        gt_disparity=gt,
        gt_normalized_depth=normalize_depth_labels(gt, d_min),
        scene_kind=kind,
        flat_mask=_sample_rows(flat, src) > 0.5,
    )


def toy_dataset(n: int, width: int, height: int, d_max: int, seed: int, d_min: float = 1.0):
    return [generate_synthetic_scene(SCENE_KINDS[i % 3], width, height, d_max, seed + i, d_min=d_min)
            for i in range(n)]


@dataclass
class Batch:
    left: torch.Tensor
    right: torch.Tensor
    disp: torch.Tensor
    disp_mask: torch.Tensor
    depth: torch.Tensor
    depth_mask: torch.Tensor


def collate(scenes: Sequence[SyntheticScene], d_max: int, dtype=torch.float32) -> Batch:
    def t(a, dt=dtype):
        return torch.as_tensor(np.stack(a), dtype=dt)
    disp = t([s.gt_disparity.values for s in scenes])
    dmask = t([s.gt_disparity.valid_mask for s in scenes], torch.bool) & (disp < d_max) & (disp >= 0)
    return Batch(t([s.left_image for s in scenes]), t([s.right_image for s in scenes]), disp, dmask,
                 t([s.gt_normalized_depth.values for s in scenes]),
                 t([s.gt_normalized_depth.valid_mask for s in scenes], torch.bool))


# --------------------------------------------------------------------------- training loop

@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 4
    max_lr: float = 0.0014
    weight_decay: float = 1e-4
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    ema_decay: float = 0.99
    d_max: int = 16
    d_min: float = 1.0
    seed: int = 0
    model_scale: str = "toy"
    num_scenes: int = 4
    height: int = 64
    width: int = 128
    eval_every: int = 50
    checkpoint_every: int = 0

    def model_config(self) -> ModelConfig:
        factory = {"toy": ModelConfig.toy, "micro": ModelConfig.micro, "full": ModelConfig.full}
        if self.model_scale not in factory:
            raise ValueError(f"unknown model_scale {self.model_scale!r}")
        return factory[self.model_scale](max_disp=self.d_max)


def parse_config_file(path) -> TrainConfig:
    """Read ``key = value`` lines (``#`` comments) into a TrainConfig."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    kw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key == "optimizer":
                if val.lower() != "adamw":
                    raise ValueError(f"{path}:{lineno}: only adamw is supported")
                continue
            if key == "schedule":
                if val.lower() not in ("onecycle", "onecycle-linear"):
                    raise ValueError(f"{path}:{lineno}: only onecycle is supported")
                continue
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            kind = types[key]
            kw[key] = int(val) if kind in (int, "int") else float(val) if kind in (float, "float") else val
    return TrainConfig(**kw)


def write_trace(trace: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        w.writeheader()
        for row in trace:
            w.writerow({k: row[k] for k in TRACE_FIELDS})


class DivergenceError(RuntimeError):
    pass


def compute_losses(out, batch: Batch):
    l_d1 = smooth_l1(out.disp, batch.disp, batch.disp_mask)
    l_d0 = smooth_l1(out.disp_prior, batch.disp, batch.disp_mask) if out.disp_prior is not None else None
    l_dep = smooth_l1(out.depth, batch.depth, batch.depth_mask) if out.depth is not None else None
    return l_d0, l_d1, l_dep


@torch.no_grad()
def evaluate_epe(model: DVANet, scenes: Sequence[SyntheticScene]) -> Dict[str, float]:
    """EPE and normalized-depth MAE in eval mode over the loss masks."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    batch = collate(scenes, model.config.max_disp, dtype)
    out = model(batch.left, batch.right)
    res = {"epe": float((out.disp - batch.disp)[batch.disp_mask].abs().mean())}
    if out.depth is not None:
        res["depth_mae"] = float((out.depth - batch.depth)[batch.depth_mask].abs().mean())
    model.train(was_training)
    return res


@dataclass
class TrainResult:
    trace: List[dict]
    evals: List[dict] = field(default_factory=list)


def _make_optim(model, cfg: TrainConfig):
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.max_lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(
        opt, max_lr=cfg.max_lr, total_steps=cfg.steps, pct_start=cfg.pct_start,
        anneal_strategy="linear", div_factor=cfg.div_factor, final_div_factor=cfg.final_div_factor)
    return opt, sched


def train(model: DVANet, scenes: Sequence[SyntheticScene], cfg: TrainConfig,
          holdout: Optional[Sequence[SyntheticScene]] = None, checkpoint_path=None,
          resume_from=None, stop_after: Optional[int] = None,
          callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """AdamW + linear OneCycle training on in-memory scenes.

    ``resume_from`` restores weights, optimizer, schedule, loss normalizers and the
    batch sampler. ``stop_after`` ends the run early at that step (for split runs).
    """
    if not scenes:
        raise ValueError("dataset is empty")
    opt, sched = _make_optim(model, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    norm_state, start, trace, evals = None, 0, [], []
    if resume_from is not None:
        saved, extra = load_checkpoint(resume_from)
        model.load_state_dict(saved.state_dict())
        opt.load_state_dict(extra["optimizer"])
        sched.load_state_dict(extra["scheduler"])
        gen.set_state(extra["generator"])
        torch.set_rng_state(extra["torch_rng"])
        norm_state = tuple(extra["normalizers"])
        start = extra["step"]
        trace = list(extra["trace"])
        evals = list(extra.get("evals", []))

    def snapshot(step):
        return dict(optimizer=opt.state_dict(), scheduler=sched.state_dict(), generator=gen.get_state(),
                    torch_rng=torch.get_rng_state(), normalizers=list(norm_state), step=step,
                    trace=trace, evals=evals, train_config=asdict(cfg))

    dtype = next(model.parameters()).dtype
    n = len(scenes)
    bs = min(cfg.batch_size, n)
    end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    model.train()
    for step in range(start, end):
        idx = torch.randperm(n, generator=gen)[:bs].tolist()
        batch = collate([scenes[i] for i in sorted(idx)], cfg.d_max, dtype)
        lr = opt.param_groups[0]["lr"]
        out = model(batch.left, batch.right)
        losses = compute_losses(out, batch)
        total, norm_state = total_loss(losses, norm_state, cfg.ema_decay)
        if not torch.isfinite(total):
            raise DivergenceError(f"non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        sched.step()
        row = {"step": step, "loss_d0": _f(losses[0]), "loss_d1": _f(losses[1]),
               "loss_dep": _f(losses[2]), "total": float(total.detach()), "lr": lr}
        trace.append(row)
        if callback:
            callback(row)
        if holdout and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            ev = {"step": step, **evaluate_epe(model, holdout)}
            evals.append(ev)
            logger.info("step %d holdout %s", step, ev)
        if checkpoint_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, **snapshot(step + 1))
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, **snapshot(end))
    return TrainResult(trace, evals)


def _f(x):
    return float("nan") if x is None else float(x.detach())
