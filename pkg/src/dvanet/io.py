"""Readers and writers for disparity/depth interchange formats and dataset manifests.

Sentinels are converted to masks here; nothing downstream sees 0-encoded invalids.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .geometry import DepthMap, DisparityMap, StereoCalibration

DATASET_KINDS = ("kitti", "sceneflow", "rsrd", "synthetic")


class FormatError(ValueError):
    pass


# --------------------------------------------------------------------------- PFM

def read_pfm(path) -> Tuple[np.ndarray, float]:
    """Read a grayscale ``Pf`` file. Returns (float32 grid top-down, scale magnitude)."""
    with open(path, "rb") as fh:
        header = fh.readline().rstrip()
        if header != b"Pf":
            raise FormatError(f"{path}: expected grayscale 'Pf' header, got {header[:8]!r}")
        dims = fh.readline()
        m = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise FormatError(f"{path}: malformed dimension line {dims!r}")
        w, h = int(m.group(1)), int(m.group(2))
        try:
            scale = float(fh.readline().strip())
        except ValueError as e:
            raise FormatError(f"{path}: malformed scale line") from e
        if scale == 0:
            raise FormatError(f"{path}: scale must be non-zero")
        endian = "<" if scale < 0 else ">"
        data = fh.read()
    if len(data) < 4 * w * h:
        raise FormatError(f"{path}: truncated payload ({len(data)} of {4 * w * h} bytes)")
    arr = np.frombuffer(data[: 4 * w * h], dtype=endian + "f4").reshape(h, w)
    return np.flipud(arr).astype(np.float32), abs(scale)


def write_pfm(path, array, scale: float = 1.0) -> None:
    """Write a little-endian grayscale PFM (bottom-up rows)."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise FormatError("PFM writer takes a 2D grid")
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n%d %d\n%r\n" % (w, h, -abs(float(scale))))
        fh.write(np.flipud(arr).astype("<f4").tobytes())


def read_pfm_disparity(path) -> DisparityMap:
    """PFM disparity; non-finite entries are invalid."""
    grid, _ = read_pfm(path)
    return DisparityMap(grid.astype(np.float64))


# --------------------------------------------------------------------------- 16-bit PNG

def _read_png16(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.format != "PNG":
            raise FormatError(f"{path}: not a PNG")
        if im.mode not in ("I;16", "I;16B", "I;16L"):
            raise FormatError(f"{path}: expected 16-bit single-channel PNG, got mode {im.mode}")
        return np.array(im, dtype=np.uint16)


def write_png16(path, raw) -> None:
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise FormatError("16-bit PNG writer takes a 2D grid")
    Image.fromarray(np.ascontiguousarray(raw, dtype=np.uint16)).save(path, format="PNG")


def read_kitti_disparity(path) -> DisparityMap:
    raw = _read_png16(path).astype(np.float64)
    return DisparityMap(raw / 256.0, raw > 0)


def write_kitti_disparity(path, disp: DisparityMap) -> None:
    raw = np.zeros(disp.shape, dtype=np.uint16)
    v = np.clip(np.round(disp.values[disp.valid_mask] * 256.0), 1, 65535)
    raw[disp.valid_mask] = v.astype(np.uint16)
    write_png16(path, raw)


def read_depth_png(path, scale_mm: float = 1.0) -> DepthMap:
    raw = _read_png16(path).astype(np.float64)
    return DepthMap(raw * scale_mm / 1000.0, raw > 0)


def read_image(path) -> np.ndarray:
    """RGB image as float32 [3, H, W] in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path, img) -> None:
    arr = np.clip(np.asarray(img).transpose(1, 2, 0) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_disparity(path) -> DisparityMap:
    """Dispatch on extension: ``.pfm`` or KITTI-style 16-bit ``.png``."""
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return read_pfm_disparity(path)
    if suffix == ".png":
        return read_kitti_disparity(path)
    raise FormatError(f"{path}: unsupported disparity format {suffix!r}")


def channel_argmax_map(a_c) -> np.ndarray:
    """Channel-attention dump: per-pixel argmax over the 32 channels, spread over 16 bits."""
    a_c = np.asarray(a_c)
    idx = a_c.argmax(axis=0).astype(np.float64)
    return np.round(idx * 65535.0 / (a_c.shape[0] - 1)).astype(np.uint16)


def disparity_entropy_map(a_d) -> np.ndarray:
    """Disparity-attention dump: normalized entropy over disparities of [1, D, h, w], 16-bit."""
    p = np.asarray(a_d, dtype=np.float64).reshape(-1, *np.shape(a_d)[-2:])
    ent = -(p * np.log(np.clip(p, 1e-300, None))).sum(0) / np.log(p.shape[0])
    return np.round(np.clip(ent, 0, 1) * 65535.0).astype(np.uint16)


# --------------------------------------------------------------------------- PLY

def write_ply(points, path) -> None:
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    if not np.isfinite(pts).all():
        raise FormatError("point cloud contains non-finite coordinates")
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for x, y, z in pts:
            fh.write(f"{_fmt32(x)} {_fmt32(y)} {_fmt32(z)}\n")


def _fmt32(v) -> str:
    # shortest repr that round-trips the float32 value
    return np.format_float_positional(np.float32(v), trim="-")


def read_ply(path) -> np.ndarray:
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise FormatError(f"{path}: not a PLY file")
        n = None
        for line in fh:
            line = line.strip()
            if line.startswith("format") and "ascii" not in line:
                raise FormatError(f"{path}: only ASCII PLY is supported")
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            if line == "end_header":
                break
        if n is None:
            raise FormatError(f"{path}: missing vertex element")
        rows = [fh.readline().split() for _ in range(n)]
    if any(len(r) < 3 for r in rows):
        raise FormatError(f"{path}: truncated vertex list")
    return np.array([[float(v) for v in r[:3]] for r in rows], dtype=np.float32).reshape(-1, 3)


# --------------------------------------------------------------------------- manifests

@dataclass
class SampleRecord:
    left_path: str
    right_path: str
    gt_path: Optional[str]
    calib: Optional[StereoCalibration]
    dataset_kind: str = "synthetic"

    def __post_init__(self):
        if self.dataset_kind not in DATASET_KINDS:
            raise FormatError(f"unknown dataset kind {self.dataset_kind!r}")

    def check_exists(self) -> None:
        for p in (self.left_path, self.right_path, self.gt_path):
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(p)

    def to_dict(self) -> dict:
        return {"left_path": self.left_path, "right_path": self.right_path, "gt_path": self.gt_path,
                "calib": self.calib.to_dict() if self.calib else None, "dataset_kind": self.dataset_kind}


def read_manifest(path) -> List[SampleRecord]:
    """One JSON object per line; relative paths resolve against the manifest directory."""
    base = Path(path).parent
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from e

            def res(p):
                return None if p is None else str(p if Path(p).is_absolute() else base / p)

            calib = StereoCalibration.from_dict(d["calib"]) if d.get("calib") else None
            out.append(SampleRecord(res(d["left_path"]), res(d["right_path"]), res(d.get("gt_path")),
                                    calib, d.get("dataset_kind", "synthetic")))
    return out


def write_manifest(records: Sequence[SampleRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


# --------------------------------------------------------------------------- preprocessing

def resize_and_crop(image: np.ndarray, size: Tuple[int, int], disparity: Optional[DisparityMap] = None,
                    scale: Optional[float] = None):
    """Resize [3, H, W] by ``scale`` (default: smallest that covers ``size``), center-crop to ``size``.

    Disparities are resampled with nearest-neighbour and multiplied by the horizontal factor.
    """
    _, h, w = image.shape
    th, tw = size
    if scale is None:
        scale = max(th / h, tw / w)
    nh, nw = max(th, int(round(h * scale))), max(tw, int(round(w * scale)))
    pil = [Image.fromarray(c) for c in image.astype(np.float32)]
    resized = np.stack([np.asarray(c.resize((nw, nh), Image.BILINEAR)) for c in pil])
    y0, x0 = (nh - th) // 2, (nw - tw) // 2
    out = resized[:, y0:y0 + th, x0:x0 + tw]
    if disparity is None:
        return out
    fx = nw / w
    vals = np.asarray(Image.fromarray(disparity.values.astype(np.float32)).resize((nw, nh), Image.NEAREST))
    mask = np.asarray(Image.fromarray(disparity.valid_mask.astype(np.uint8)).resize((nw, nh), Image.NEAREST))
    d = DisparityMap(vals[y0:y0 + th, x0:x0 + tw].astype(np.float64) * fx, mask[y0:y0 + th, x0:x0 + tw] > 0)
    return out, d
