"""Sheet scans to clean, fixed-size character tensors.

Images are ``uint8`` arrays of shape (H, W, C) with C in {1, 3}. The on-disk
format is binary PGM (P5) / PPM (P6) with maxval 255.
"""
from __future__ import annotations

import csv
import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .exceptions import EmptySegmentationWarning, FormatError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
MIN_GLYPH = 8


# -- portable pixmap I/O ---------------------------------------------------

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos:pos + 1].isspace():
            pos += 1
        elif buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated header")
    return buf[start:pos], pos


def decode_pnm(buf: bytes) -> np.ndarray:
    """Decode binary P5/P6 bytes to an (H, W, C) uint8 array."""
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic[:8]!r}; expected P5 or P6")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"malformed header field {tok[:16]!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"only 8-bit rasters are supported (maxval {maxval})")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after header")
    pos += 1
    channels = 1 if magic == b"P5" else 3
    size = width * height * channels
    if len(buf) - pos < size:
        raise FormatError(f"truncated raster: {len(buf) - pos} of {size} bytes")
    data = np.frombuffer(buf, dtype=np.uint8, count=size, offset=pos)
    return data.reshape(height, width, channels).copy()


def encode_pnm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise FormatError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ShapeError(f"expected 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def load_image(path, channels: int = 3) -> np.ndarray:
    """Read a P5/P6 file; grayscale is replicated to 3 channels unless ``channels=1``."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        img = decode_pnm(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return to_channels(img, channels)


def save_image(path, img: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_pnm(img))


def to_channels(img: np.ndarray, channels: int) -> np.ndarray:
    if img.ndim == 2:
        img = img[:, :, None]
    c = img.shape[2]
    if c == channels:
        return img
    if channels == 3 and c == 1:
        return np.repeat(img, 3, axis=2)
    if channels == 1 and c == 3:
        return grayscale(img)[:, :, None]
    raise ShapeError(f"cannot convert {c} channels to {channels}")


def grayscale(img: np.ndarray) -> np.ndarray:
    """(H, W) uint8 luma."""
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[:, :, 0]
    return np.clip(np.rint(img[:, :, :3].astype(np.float64) @ LUMA), 0, 255).astype(np.uint8)


# -- binarization and segmentation --------------------------------------------

def otsu_level(gray: np.ndarray) -> int | None:
    """Threshold ``t`` maximizing between-class variance of {<= t} vs {> t}.

    Returns None when the histogram has a single occupied bin. Ties go to
    the smallest ``t``.
    """
    hist = np.bincount(np.asarray(gray, dtype=np.uint8).ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    if total == 0 or np.count_nonzero(hist) < 2:
        return None
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = total - w0
    s0 = np.cumsum(hist * levels)
    mu_total = s0[-1] / total
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_total * w0 - s0) ** 2 / (w0 * w1)
    between[(w0 == 0) | (w1 == 0)] = -1.0
    return int(np.argmax(between))


def otsu_threshold(img: np.ndarray) -> np.ndarray:
    """Boolean ink mask: True where the pixel is at or below the Otsu level."""
    gray = grayscale(img)
    level = otsu_level(gray)
    if level is None:
        return np.zeros(gray.shape, dtype=bool)
    return gray <= level


@dataclass
class CharCrop:
    image: np.ndarray
    source_sheet: str
    bounding_box: tuple[int, int, int, int]  # x, y, w, h
    sequence_index: int


def _expand(lo, hi, size, minimum):
    if hi - lo >= minimum:
        return lo, hi
    grow = minimum - (hi - lo)
    lo = max(0, lo - grow // 2)
    hi = min(size, lo + minimum)
    lo = max(0, hi - minimum)
    return lo, hi


def _row_major(boxes):
    """Group boxes (y0, y1, x0, x1) into bands of median height, then sort by x."""
    if not boxes:
        return []
    band_h = float(np.median([b[1] - b[0] for b in boxes]))
    order = sorted(range(len(boxes)), key=lambda i: (boxes[i][0], boxes[i][2]))
    bands, band_top = [], None
    for i in order:
        if band_top is None or boxes[i][0] >= band_top + band_h:
            bands.append([])
            band_top = boxes[i][0]
        bands[-1].append(i)
    return [i for band in bands for i in sorted(band, key=lambda j: (boxes[j][2], boxes[j][0]))]


def segment_sheet(sheet: np.ndarray, min_area: int = 30, pad: int = 4, source: str = "") -> list[CharCrop]:
    """Cut a scanned sheet into per-character crops.

    Ink components (8-connected) smaller than ``min_area`` pixels are dropped
    as dust. Boxes are padded, clipped to the sheet and grown to at least
    8x8 pixels.
    """
    h, w = sheet.shape[:2]
    if h < 64 or w < 64:
        raise ShapeError(f"sheet must be at least 64x64, got {w}x{h}")
    mask = otsu_threshold(sheet)
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    boxes = []
    if count:
        areas = np.bincount(labels.ravel(), minlength=count + 1)
        for comp, sl in enumerate(ndimage.find_objects(labels), start=1):
            if sl is None or areas[comp] < min_area:
                continue
            boxes.append((sl[0].start, sl[0].stop, sl[1].start, sl[1].stop))
    if not boxes:
        warnings.warn(f"no character components found in {source or 'sheet'}", EmptySegmentationWarning, stacklevel=2)
        return []
    crops = []
    for seq, i in enumerate(_row_major(boxes)):
        y0, y1, x0, x1 = boxes[i]
        y0, y1 = _expand(max(0, y0 - pad), min(h, y1 + pad), h, MIN_GLYPH)
        x0, x1 = _expand(max(0, x0 - pad), min(w, x1 + pad), w, MIN_GLYPH)
        crops.append(CharCrop(sheet[y0:y1, x0:x1].copy(), source, (x0, y0, x1 - x0, y1 - y0), seq))
    return crops


def write_crops(crops: list[CharCrop], out_dir, sheet_stem: str) -> list[tuple]:
    """Write ``<sheet_stem>/<seq>.ppm`` files; returns crop-index rows."""
    rows = []
    for crop in crops:
        save_image(Path(out_dir) / sheet_stem / f"{crop.sequence_index}.ppm", to_channels(crop.image, 3))
        rows.append((sheet_stem, crop.sequence_index, *crop.bounding_box))
    return rows


def write_crop_index(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sheet", "seq", "x", "y", "w", "h"])
        writer.writerows(rows)


# -- cleanup, resizing, normalization ---------------------------------------------

def median_denoise(img: np.ndarray, window: int = 3) -> np.ndarray:
    """Per-channel median filter with edge-clamped borders."""
    img = np.asarray(img)
    size = (window, window) if img.ndim == 2 else (window, window, 1)
    return ndimage.median_filter(img, size=size, mode="nearest")


def _bilinear_axis(n_in, n_out):
    # half-pixel centers: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the edge
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"output size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        out = img.copy()
    else:
        y0, y1, fy = _bilinear_axis(h, out_h)
        x0, x1, fx = _bilinear_axis(w, out_w)
        f = img.astype(np.float64)
        fy = fy[:, None, None]
        fx = fx[None, :, None]
        top = f[y0][:, x0] * (1 - fx) + f[y0][:, x1] * fx
        bottom = f[y1][:, x0] * (1 - fx) + f[y1][:, x1] * fx
        out = np.clip(np.rint(top * (1 - fy) + bottom * fy), 0, 255).astype(np.uint8)
    return out[:, :, 0] if squeeze else out


def normalize(img: np.ndarray) -> np.ndarray:
    """uint8 (H, W, C) -> float64 (C, H, W) in [0, 1]."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float64) / 255.0


def to_uint8(t: np.ndarray) -> np.ndarray:
    """float (C, H, W) in [0, 1] -> uint8 (H, W, C), rounding to nearest."""
    return np.clip(np.rint(np.asarray(t) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0).copy()


def preprocess(img: np.ndarray, size=(224, 224), channels: int = 3, denoise: bool = True) -> np.ndarray:
    """denoise -> resize -> normalize, the path a raw crop takes into the network."""
    img = to_channels(img, channels)
    if denoise:
        img = median_denoise(img)
    return normalize(resize_bilinear(img, size[0], size[1]))


def worker_count() -> int:
    """Worker cap from ``SCRIPTBMI_THREADS`` (default: CPU count)."""
    value = os.environ.get("SCRIPTBMI_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            logger.warning("ignoring non-integer SCRIPTBMI_THREADS=%r", value)
    return os.cpu_count() or 1
