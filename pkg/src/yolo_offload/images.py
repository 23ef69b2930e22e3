"""PPM/PGM reading and writing, optional PNG input, and box annotation."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Sequence, Union

import numpy as np

PathLike = Union[str, Path]

PNM_SUFFIXES = {".ppm", ".pgm", ".pnm"}
IMAGE_SUFFIXES = PNM_SUFFIXES | {".png", ".jpg", ".jpeg"}

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pnm(path: PathLike) -> np.ndarray:
    """Read a binary P6 (RGB) or P5 (gray) file with maxval 255."""
    data = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PNM header")
        fields.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P6", b"P5"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    raster = data[pos:pos + n]
    if len(raster) != n:
        raise ValueError(f"{path}: raster has {len(raster)} bytes, expected {n}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_pnm(path: PathLike, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write image of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def read_image(path: PathLike) -> np.ndarray:
    """Read an image as (H, W, 3) or (H, W) uint8. Non-PNM formats need Pillow."""
    path = Path(path)
    if path.suffix.lower() in PNM_SUFFIXES:
        return read_pnm(path)
    try:
        from PIL import Image
    except ImportError:
        raise ValueError(f"{path}: reading {path.suffix} files requires Pillow") from None
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def list_images(directory: PathLike) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def class_color(class_id: int) -> tuple[int, int, int]:
    rng = np.random.default_rng(class_id * 7919 + 17)
    return tuple(int(v) for v in rng.integers(64, 256, size=3))


def draw_detections(pixels: np.ndarray, detections: Sequence, thickness: int = 2) -> np.ndarray:
    """Burn boxes and labels into a copy of ``pixels``.

    ``detections`` items need ``class_id``, ``label``, ``prob`` and either a
    ``box`` with normalized ``cx, cy, w, h`` or those fields directly.
    """
    img = np.array(pixels, dtype=np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    h, w = img.shape[:2]
    labels = []
    for det in detections:
        b = getattr(det, "box", det)
        x0 = int(np.clip(round((b.cx - b.w / 2) * w), 0, w - 1))
        x1 = int(np.clip(round((b.cx + b.w / 2) * w), 0, w - 1))
        y0 = int(np.clip(round((b.cy - b.h / 2) * h), 0, h - 1))
        y1 = int(np.clip(round((b.cy + b.h / 2) * h), 0, h - 1))
        color = class_color(det.class_id)
        t = thickness
        img[y0:min(y0 + t, y1 + 1), x0:x1 + 1] = color
        img[max(y1 - t + 1, y0):y1 + 1, x0:x1 + 1] = color
        img[y0:y1 + 1, x0:min(x0 + t, x1 + 1)] = color
        img[y0:y1 + 1, max(x1 - t + 1, x0):x1 + 1] = color
        labels.append((x0, y0, f"{det.label or det.class_id} {det.prob:.2f}", color))
    if labels:
        img = _draw_labels(img, labels)
    return img


def _draw_labels(img: np.ndarray, labels) -> np.ndarray:
    try:
        from PIL import Image, ImageDraw
    except ImportError:
        return img
    im = Image.fromarray(img)
    draw = ImageDraw.Draw(im)
    for x, y, text, color in labels:
        left, top, right, bottom = draw.textbbox((x, y), text)
        ty = max(0, y - (bottom - top) - 2)
        draw.rectangle((x, ty, x + right - left + 2, ty + bottom - top + 2), fill=color)
        draw.text((x + 1, ty), text, fill=(0, 0, 0))
    return np.asarray(im, dtype=np.uint8).copy()


def synthetic_pattern(width: int, height: int, t: int = 0) -> np.ndarray:
    """Moving colour-bar pattern used by the synthetic camera source."""
    x = (np.arange(width, dtype=np.int64)[None, :] + 4 * t) % 256
    y = (np.arange(height, dtype=np.int64)[:, None] + 2 * t) % 256
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:, :, 0] = x
    img[:, :, 1] = y
    img[:, :, 2] = (x + y) // 2
    return img
