"""Region decoding, IoU, per-class NMS and network input preprocessing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .nnet import DTYPE

DEFAULT_CONF_THRESHOLD = 0.24
DEFAULT_NMS_THRESHOLD = 0.45


@dataclass(frozen=True)
class BBox:
    """Center-size box normalized to the image (may extend past its edges)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError("box width and height must be non-negative")

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    prob: float
    label: str = ""


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def decode_region(pred: np.ndarray, anchors: Sequence[tuple[float, float]], num_classes: int,
                  conf_threshold: float = DEFAULT_CONF_THRESHOLD,
                  class_names: Optional[Sequence[str]] = None) -> list[Detection]:
    """Decode a raw region tensor into thresholded candidates (before NMS).

    Channel layout per anchor is ``tx, ty, tw, th, objectness, class logits``.
    Candidates come out in (anchor, row, col) order, one per cell and anchor.
    """
    pred = np.asarray(pred, dtype=np.float64)
    num = len(anchors)
    entries = 5 + num_classes
    if pred.ndim != 4 or pred.shape[0] != 1 or pred.shape[1] != num * entries \
            or pred.shape[2] != pred.shape[3]:
        raise ValueError(f"prediction shape {pred.shape} inconsistent with "
                         f"{num} anchors and {num_classes} classes")
    grid = pred.shape[2]
    p = pred[0].reshape(num, entries, grid, grid)
    aw = np.array([a[0] for a in anchors], dtype=np.float64)[:, None, None]
    ah = np.array([a[1] for a in anchors], dtype=np.float64)[:, None, None]
    cols = np.arange(grid, dtype=np.float64)[None, None, :]
    rows = np.arange(grid, dtype=np.float64)[None, :, None]

    cx = (_sigmoid(p[:, 0]) + cols) / grid
    cy = (_sigmoid(p[:, 1]) + rows) / grid
    with np.errstate(over="ignore"):
        w = aw * np.exp(p[:, 2]) / grid
        h = ah * np.exp(p[:, 3]) / grid
    obj = _sigmoid(p[:, 4])
    cls_prob = _softmax(p[:, 5:], axis=1)
    best = cls_prob.argmax(axis=1)
    score = obj * np.take_along_axis(cls_prob, best[:, None], axis=1)[:, 0]

    out: list[Detection] = []
    for a, i, j in zip(*np.nonzero(score >= conf_threshold)):
        c = int(best[a, i, j])
        label = class_names[c] if class_names is not None else str(c)
        out.append(Detection(
            box=BBox(float(cx[a, i, j]), float(cy[a, i, j]), float(w[a, i, j]), float(h[a, i, j])),
            class_id=c, prob=float(score[a, i, j]), label=label))
    return out


def nms(candidates: Sequence[Detection], iou_threshold: float = DEFAULT_NMS_THRESHOLD
        ) -> list[Detection]:
    """Greedy per-class suppression; output sorted by prob, ties by input order."""
    order = sorted(range(len(candidates)), key=lambda k: (-candidates[k].prob, k))
    kept: dict[int, list[Detection]] = {}
    out = []
    for k in order:
        det = candidates[k]
        same_class = kept.setdefault(det.class_id, [])
        if all(iou(det.box, other.box) < iou_threshold for other in same_class):
            same_class.append(det)
            out.append(det)
    return out


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of an (H, W, C) float array."""
    in_h, in_w = src.shape[:2]

    def axis_weights(n_in: int, n_out: int):
        pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_weights(in_h, out_h)
    x0, x1, fx = axis_weights(in_w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def image_to_rgb(pixels: np.ndarray) -> np.ndarray:
    """Promote (H, W) gray or (H, W, 3) RGB uint8 to (H, W, 3)."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[:, :, None], 3, axis=2)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected an (H, W) or (H, W, 3) image, got {pixels.shape}")
    if pixels.shape[0] == 0 or pixels.shape[1] == 0:
        raise ValueError("image has a zero dimension")
    return pixels


def resize_to_input(image, side: int, letterbox: bool = False) -> np.ndarray:
    """Resize an image (array or ImageFrame) to a (1, 3, side, side) float32 tensor in [0, 1].

    The default is a plain stretch. ``letterbox=True`` keeps the aspect ratio
    and pads with 0.5 grey.
    """
    if side <= 0 or side % 32:
        raise ValueError(f"side must be a positive multiple of 32, got {side}")
    pixels = image.to_array() if hasattr(image, "to_array") else image
    rgb = image_to_rgb(pixels).astype(np.float64) / 255.0
    h, w = rgb.shape[:2]
    if not letterbox:
        out = rgb if (h, w) == (side, side) else bilinear_resize(rgb, side, side)
    else:
        scale = min(side / w, side / h)
        nw, nh = max(1, round(w * scale)), max(1, round(h * scale))
        out = np.full((side, side, 3), 0.5)
        top, left = (side - nh) // 2, (side - nw) // 2
        out[top:top + nh, left:left + nw] = bilinear_resize(rgb, nh, nw)
    return np.ascontiguousarray(out.transpose(2, 0, 1)[None], dtype=DTYPE)


def correct_letterbox(dets: Sequence[Detection], image_w: int, image_h: int,
                      side: int) -> list[Detection]:
    """Map boxes decoded on a letterboxed input back to full-image coordinates."""
    scale = min(side / image_w, side / image_h)
    pw, ph = max(1, round(image_w * scale)), max(1, round(image_h * scale))
    nw, nh = pw / side, ph / side
    ox, oy = ((side - pw) // 2) / side, ((side - ph) // 2) / side
    out = []
    for d in dets:
        b = d.box
        box = BBox((b.cx - ox) / nw, (b.cy - oy) / nh, b.w / nw, b.h / nh)
        out.append(Detection(box, d.class_id, d.prob, d.label))
    return out
