"""Command-line entry point: ``dvanet <command>`` or ``python -m dvanet <command>``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import io as dio
from .geometry import StereoCalibration, disparity_to_pointcloud
from .geometry import disparity_to_depth
from .metrics import (
    MetricError,
    MetricReport,
    WrdeConfig,
    _as_pair,
    bin_errors,
    compare_models,
    relative_depth_error,
    report_from_counts,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DISPARITY_SUFFIXES = (".pfm", ".png")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".ppm", ".bmp")

logger = logging.getLogger("dvanet")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _range(text):
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("expected zmin:zmax") from None
    return lo, hi


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError("expected HxW") from None
    return h, w


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    calib = argparse.ArgumentParser(add_help=False)
    calib.add_argument("--focal", type=float, help="focal length in pixels")
    calib.add_argument("--baseline", type=float, help="stereo baseline in meters")
    calib.add_argument("--cx", type=float)
    calib.add_argument("--cy", type=float)

    p = _Parser(prog="dvanet", description="Depth-aware volume attention stereo toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ev = sub.add_parser("evaluate", parents=[common, calib], help="disparity metrics and WRDE")
    ev.add_argument("pred_dir")
    ev.add_argument("gt_dir")
    ev.add_argument("--preset", choices=("kitti", "rsrd"))
    ev.add_argument("--wrde-range", type=_range, help="zmin:zmax in meters")
    ev.add_argument("--wrde-interval", type=float)
    ev.add_argument("--wrde-weights", default="1,2,3")
    ev.add_argument("--d1-abs", type=float, default=3.0)
    ev.add_argument("--d1-rel", type=float, default=0.05)

    cp = sub.add_parser("compare", parents=[common], help="compare evaluate outputs")
    cp.add_argument("report_dirs", nargs="+")

    inf = sub.add_parser("infer", parents=[common, calib], help="run a checkpoint on image pairs")
    inf.add_argument("checkpoint")
    inf.add_argument("--left", nargs="*", default=[])
    inf.add_argument("--right", nargs="*", default=[])
    inf.add_argument("--manifest")
    inf.add_argument("--dmax", type=int, help="override the maximum disparity (multiple of 16)")
    inf.add_argument("--resize", type=_size, help="resize-and-crop to HxW before inference")
    inf.add_argument("--format", choices=("pfm", "png"), default="pfm")
    inf.add_argument("--dump-attention", action="store_true")
    inf.add_argument("--ply", action="store_true", help="also write a point cloud (needs calibration)")

    tr = sub.add_parser("train-toy", parents=[common], help="desk-scale training on synthetic scenes")
    tr.add_argument("--config", help="key = value training config file")
    tr.add_argument("--steps", type=int)
    tr.add_argument("--dmax", type=int)
    tr.add_argument("--dmin", type=float)
    tr.add_argument("--max-lr", type=float)

    pc = sub.add_parser("export-pointcloud", parents=[common, calib], help="disparity map to PLY")
    pc.add_argument("disparity", nargs="+")

    sub.add_parser("selftest", parents=[common], help="run the invariant suite")
    return p


def _calibration(args, required=True):
    if args.focal is None or args.baseline is None:
        if required:
            raise UsageError("--focal and --baseline are required")
        return None
    pp = (args.cx, args.cy) if args.cx is not None and args.cy is not None else None
    try:
        return StereoCalibration(args.focal, args.baseline, pp)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _wrde_config(args) -> WrdeConfig:
    if args.preset:
        base = WrdeConfig.kitti() if args.preset == "kitti" else WrdeConfig.rsrd()
        z_min, z_max, interval = base.z_min, base.z_max, base.interval
    else:
        z_min = z_max = interval = None
    if args.wrde_range:
        z_min, z_max = args.wrde_range
    if args.wrde_interval:
        interval = args.wrde_interval
    if None in (z_min, z_max, interval):
        raise UsageError("give --preset or both --wrde-range and --wrde-interval")
    try:
        weights = tuple(float(w) for w in args.wrde_weights.split(","))
        return WrdeConfig(z_min, z_max, interval, weights)
    except (ValueError, MetricError) as e:
        raise UsageError(f"invalid WRDE config: {e}") from e


def _by_stem(directory, suffixes):
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"not a directory: {directory}")
    out = {}
    for p in sorted(d.iterdir()):
        if p.suffix.lower() in suffixes:
            if p.stem in out:
                raise DataError(f"duplicate stem {p.stem!r} in {directory}")
            out[p.stem] = p
    return out


def _write_manifest(out: Path, args, extra=None):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    body = {"command": args.command, "config": cfg, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
    if extra:
        body.update(extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True, default=str)


# --------------------------------------------------------------------------- evaluate

def _eval_one(job):
    stem, pred_path, gt_path, calib, config = job
    pred = dio.read_disparity(pred_path)
    gt = dio.read_disparity(gt_path)
    pred, gt, m = _as_pair(pred, gt)
    rel, rel_mask = relative_depth_error(pred, gt)
    curve = bin_errors(disparity_to_depth(gt, calib), rel, config, rel_mask)
    return stem, np.abs(pred.values[m] - gt.values[m]), gt.values[m], curve


def _pmap(fn, jobs, workers):
    if workers <= 1:
        return list(map(fn, jobs))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def _summary(name, r: MetricReport) -> str:
    wr = "-" if r.wrde is None else f"{100 * r.wrde:.4f}"
    return (f"{name}: EPE {r.epe_px:.4f} px | >1px {100 * r.rate_gt_1px:.3f}% | >2px "
            f"{100 * r.rate_gt_2px:.3f}% | D1 {100 * r.d1_3px:.3f}% | WRDE {wr}% | n={r.valid_pixel_count}")


def cmd_evaluate(args) -> int:
    calib = _calibration(args)
    config = _wrde_config(args)
    preds = _by_stem(args.pred_dir, DISPARITY_SUFFIXES)
    gts = _by_stem(args.gt_dir, DISPARITY_SUFFIXES)
    missing_gt = sorted(set(preds) - set(gts))
    missing_pred = sorted(set(gts) - set(preds))
    if missing_gt or missing_pred or not preds:
        for s in missing_gt:
            print(f"unmatched prediction: {preds[s]}", file=sys.stderr)
        for s in missing_pred:
            print(f"unmatched ground truth: {gts[s]}", file=sys.stderr)
        if not preds:
            print("no prediction files found", file=sys.stderr)
        return EXIT_DATA

    out = Path(args.out)
    (out / "per_image").mkdir(parents=True, exist_ok=True)
    jobs = [(s, str(preds[s]), str(gts[s]), calib, config) for s in sorted(preds)]
    results = _pmap(_eval_one, jobs, args.workers)

    all_err, all_gt, agg_curve = [], [], None
    for stem, err, gtv, curve in results:
        rep = report_from_counts(err, gtv, curve, config, args.d1_abs, args.d1_rel)
        rep.to_json(out / "per_image" / f"{stem}.json")
        curve.to_csv(out / "per_image" / f"{stem}_curve.csv")
        if args.verbose:
            print(_summary(stem, rep))
        all_err.append(err)
        all_gt.append(gtv)
        agg_curve = curve if agg_curve is None else agg_curve.merge(curve)
    agg = report_from_counts(np.concatenate(all_err), np.concatenate(all_gt), agg_curve, config,
                             args.d1_abs, args.d1_rel)
    agg.to_json(out / "aggregate.json")
    agg_curve.to_csv(out / "curve.csv")
    _write_manifest(out, args, {"calibration": calib.to_dict(), "wrde_config": config.to_dict(),
                                "images": [j[0] for j in jobs]})
    print(_summary("aggregate", agg))
    return EXIT_OK


# --------------------------------------------------------------------------- compare

def cmd_compare(args) -> int:
    reports = {}
    for d in args.report_dirs:
        d = Path(d)
        try:
            reports[d.name] = MetricReport.from_files(d / "aggregate.json", d / "curve.csv")
        except FileNotFoundError as e:
            raise DataError(f"{d}: missing evaluate output ({e.filename})") from e
    table = compare_models(reports)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "comparison.csv", out / "curves.csv")
    _write_manifest(out, args)
    print("rates and WRDE in percent, EPE in pixels")
    print(table.format())
    return EXIT_OK


# --------------------------------------------------------------------------- infer / train

def _pairs(args):
    if args.manifest:
        recs = dio.read_manifest(args.manifest)
        return [(Path(r.left_path), Path(r.right_path), r.calib) for r in recs]
    if len(args.left) != len(args.right):
        raise UsageError("--left and --right need the same number of files")
    if not args.left:
        raise UsageError("give --left/--right images or --manifest")
    return [(Path(l), Path(r), None) for l, r in zip(args.left, args.right)]


def cmd_infer(args) -> int:
    import torch

    from .model import CheckpointError, DVANet, load_checkpoint
    from .training import set_deterministic

    if args.deterministic:
        set_deterministic(args.seed)
    try:
        model, _ = load_checkpoint(args.checkpoint)
    except (CheckpointError, FileNotFoundError) as e:
        raise DataError(str(e)) from e
    if args.dmax is not None:
        if args.dmax % 16:
            raise UsageError("--dmax must be a multiple of 16")
        state = model.state_dict()
        model = DVANet(replace(model.config, max_disp=args.dmax))
        model.load_state_dict(state)
    model.eval()
    default_calib = _calibration(args, required=args.ply)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for left_path, right_path, rec_calib in _pairs(args):
        left, right = dio.read_image(left_path), dio.read_image(right_path)
        if left.shape != right.shape:
            raise DataError(f"{left_path} and {right_path} differ in size")
        if args.resize:
            left, right = dio.resize_and_crop(left, args.resize), dio.resize_and_crop(right, args.resize)
        h, w = left.shape[1:]
        if h % 4 or w % 4:
            raise DataError(f"{left_path}: resolution {h}x{w} not divisible by 4 (use --resize)")
        if h % 16 or w % 16:
            raise DataError(f"{left_path}: resolution {h}x{w} must be divisible by 16 for the 3D hourglass")
        with torch.no_grad():
            res = model(torch.from_numpy(left)[None], torch.from_numpy(right)[None],
                        return_attention=args.dump_attention)
        disp = res.disp[0].double().numpy()
        stem = left_path.stem
        if args.format == "pfm":
            dio.write_pfm(out / f"{stem}.pfm", disp)
        else:
            from .geometry import DisparityMap
            dio.write_kitti_disparity(out / f"{stem}.png", DisparityMap(disp))
        written.append(stem)
        if args.dump_attention:
            if res.channel_attention is not None:
                dio.write_png16(out / f"{stem}_channel_attention.png",
                                dio.channel_argmax_map(res.channel_attention[0].numpy()))
            if res.disparity_attention is not None:
                dio.write_png16(out / f"{stem}_disparity_entropy.png",
                                dio.disparity_entropy_map(res.disparity_attention[0].numpy()))
        if args.ply:
            from .geometry import DisparityMap
            calib = rec_calib or default_calib
            dio.write_ply(disparity_to_pointcloud(DisparityMap(disp), calib), out / f"{stem}.ply")
    _write_manifest(out, args, {"model_config": model.config.to_dict(), "outputs": written})
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .model import DVANet
    from .training import (
        TrainConfig,
        evaluate_epe,
        parse_config_file,
        set_deterministic,
        toy_dataset,
        train,
        write_trace,
    )

    cfg = parse_config_file(args.config) if args.config else TrainConfig(max_lr=0.008)
    overrides = {"steps": args.steps, "d_max": args.dmax, "d_min": args.dmin, "max_lr": args.max_lr}
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if args.seed:
        cfg = replace(cfg, seed=args.seed)
    set_deterministic(cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = toy_dataset(cfg.num_scenes, cfg.width, cfg.height, cfg.d_max, cfg.seed, cfg.d_min)
    holdout = toy_dataset(2, cfg.width, cfg.height, cfg.d_max, cfg.seed + 1000, cfg.d_min)
    model = DVANet(cfg.model_config())

    def log(row):
        if args.verbose or row["step"] % 50 == 0:
            print(f"step {row['step']:5d} total {row['total']:.4f} d1 {row['loss_d1']:.4f} lr {row['lr']:.2e}")

    result = train(model, scenes, cfg, holdout=holdout, checkpoint_path=out / "checkpoint.pt", callback=log)
    write_trace(result.trace, out / "loss_trace.csv")
    final = {"train": evaluate_epe(model, scenes), "holdout": evaluate_epe(model, holdout)}
    with open(out / "evals.json", "w") as fh:
        json.dump({"periodic": result.evals, "final": final}, fh, indent=2)
    _write_manifest(out, args, {"train_config": asdict(cfg), "final": final})
    print(f"final train EPE {final['train']['epe']:.4f} px, depth MAE {final['train'].get('depth_mae', float('nan')):.4f}")
    return EXIT_OK


def cmd_export_pointcloud(args) -> int:
    calib = _calibration(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.disparity:
        pts = disparity_to_pointcloud(dio.read_disparity(path), calib)
        dio.write_ply(pts, out / f"{Path(path).stem}.ply")
        print(f"{path}: {len(pts)} points")
    _write_manifest(out, args, {"calibration": calib.to_dict()})
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    return EXIT_OK if run_selftest() else EXIT_INTERNAL


COMMANDS = {
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "infer": cmd_infer,
    "train-toy": cmd_train_toy,
    "export-pointcloud": cmd_export_pointcloud,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"dvanet {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, dio.FormatError, MetricError, FileNotFoundError) as e:
        print(f"dvanet {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except AssertionError as e:
        print(f"dvanet {args.command}: invariant failure: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
