"""VOC-2007 style evaluation: 11-point interpolated AP per class and mAP.

Boxes here are corner-form ``(x_min, y_min, x_max, y_max)`` in whatever
coordinate system the ground truth uses (pixels for VOC sidecars).
"""

from __future__ import annotations

import json
import logging
import xml.etree.ElementTree as ET
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from ..postproc import BBox, iou

log = logging.getLogger(__name__)

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
)

Corners = tuple[float, float, float, float]


@dataclass(frozen=True)
class TruthBox:
    class_id: int
    box: Corners
    difficult: bool = False


@dataclass(frozen=True)
class ScoredBox:
    class_id: int
    prob: float
    box: Corners


GroundTruthSet = Mapping[str, Sequence[TruthBox]]
DetectionSet = Mapping[str, Sequence[ScoredBox]]


@dataclass(frozen=True)
class APResult:
    class_id: int
    ap: float
    num_positives: int = 0
    num_detections: int = 0


def corner_iou(a: Corners, b: Corners) -> float:
    return iou(BBox.from_corners(*a), BBox.from_corners(*b))


def voc07_ap(tp_flags: Sequence[bool], num_positives: int) -> float:
    """11-point interpolated AP from rank-ordered TP/FP flags.

    Recall thresholds are compared in integer arithmetic (``10*tp >= k*npos``)
    so recall values such as 0.3 land on their threshold exactly.
    """
    if num_positives <= 0:
        raise ValueError("AP is undefined without positives")
    best = [0.0] * 11
    tp = 0
    for rank, flag in enumerate(tp_flags, start=1):
        tp += bool(flag)
        precision = tp / rank
        for k in range(11):
            if 10 * tp >= k * num_positives and precision > best[k]:
                best[k] = precision
    return sum(best) / 11.0


def _match_image(dets: Sequence[ScoredBox], truths: Sequence[TruthBox],
                 iou_threshold: float, valid: Optional[set[int]]):
    """Label each detection of one image as TP (True), FP (False) or ignored (None)."""
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].prob, k))
    matched: set[int] = set()
    labels: list[Optional[bool]] = [None] * len(dets)
    for k in order:
        det = dets[k]
        if valid is not None and det.class_id not in valid:
            log.warning("detection with unknown class_id %d counted as a false positive",
                        det.class_id)
            labels[k] = False
            continue
        best_iou, best_j = -1.0, -1
        for j, t in enumerate(truths):
            if t.class_id != det.class_id or j in matched:
                continue
            o = corner_iou(det.box, t.box)
            if o > best_iou:
                best_iou, best_j = o, j
        if best_j >= 0 and best_iou >= iou_threshold:
            if truths[best_j].difficult:
                continue
            matched.add(best_j)
            labels[k] = True
        else:
            labels[k] = False
    return labels


def evaluate_map(detections: DetectionSet, truth: GroundTruthSet, iou_threshold: float = 0.5,
                 num_classes: Optional[int] = None, workers: int = 1) -> list[APResult]:
    """Per-class 11-point AP for every class with at least one non-difficult truth box.

    Detections are ranked globally by probability (ties by image order, then
    position within the image) and matched greedily per image to the
    highest-IoU unmatched truth box of their class. Matches to ``difficult``
    truths are ignored rather than scored.
    """
    if not truth:
        raise ValueError("ground truth set is empty")
    valid = set(range(num_classes)) if num_classes is not None else None
    images = list(truth.keys()) + [k for k in detections if k not in truth]

    def match(image_id):
        return _match_image(detections.get(image_id, ()), truth.get(image_id, ()),
                            iou_threshold, valid)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            all_labels = list(pool.map(match, images))
    else:
        all_labels = [match(i) for i in images]

    positives: dict[int, int] = {}
    for boxes in truth.values():
        for t in boxes:
            if not t.difficult and (valid is None or t.class_id in valid):
                positives[t.class_id] = positives.get(t.class_id, 0) + 1

    ranked: dict[int, list[tuple[float, int, int, bool]]] = {c: [] for c in positives}
    for img_idx, (image_id, labels) in enumerate(zip(images, all_labels)):
        for k, (det, label) in enumerate(zip(detections.get(image_id, ()), labels)):
            if label is None or det.class_id not in ranked:
                continue
            ranked[det.class_id].append((-det.prob, img_idx, k, label))

    results = []
    for class_id in sorted(positives):
        entries = sorted(ranked[class_id])
        flags = [e[3] for e in entries]
        results.append(APResult(class_id, voc07_ap(flags, positives[class_id]),
                                positives[class_id], len(entries)))
    return results


def mean_ap(results: Iterable[APResult]) -> float:
    aps = [r.ap for r in results]
    return sum(aps) / len(aps) if aps else 0.0


def parse_truth_text(text: str, source: str = "<truth>") -> list[TruthBox]:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (5, 6):
            raise ValueError(f"{source}:{lineno}: expected 'class x0 y0 x1 y1 [difficult]'")
        x0, y0, x1, y1 = (float(v) for v in parts[1:5])
        difficult = len(parts) == 6 and parts[5] not in ("0", "false", "False")
        boxes.append(TruthBox(int(parts[0]), (x0, y0, x1, y1), difficult))
    return boxes


def load_truth_dir(directory) -> dict[str, list[TruthBox]]:
    """Read ``<image_id>.txt`` sidecars from ``directory``."""
    out = {}
    for path in sorted(Path(directory).glob("*.txt")):
        out[path.stem] = parse_truth_text(path.read_text(encoding="utf-8"), str(path))
    if not out:
        raise ValueError(f"no truth sidecars (*.txt) in {directory}")
    return out


def format_truth(boxes: Iterable[TruthBox]) -> str:
    return "".join(f"{b.class_id} {b.box[0]:.10g} {b.box[1]:.10g} {b.box[2]:.10g} {b.box[3]:.10g} "
                   f"{int(b.difficult)}\n" for b in boxes)


def load_detections(path) -> dict[str, list[ScoredBox]]:
    """Read a JSONL file of ``{"image": id, "detections": [{class_id, prob, box}]}`` lines."""
    out: dict[str, list[ScoredBox]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                dets = [ScoredBox(int(d["class_id"]), float(d["prob"]),
                                  tuple(float(v) for v in d["box"]))
                        for d in rec["detections"]]
                out.setdefault(str(rec["image"]), []).extend(dets)
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad detection record: {exc}") from None
    return out


def detections_record(image_id: str, dets: Iterable[ScoredBox]) -> str:
    return json.dumps({"image": image_id, "detections": [
        {"class_id": d.class_id, "prob": d.prob, "box": list(d.box)} for d in dets]})


def voc_xml_to_truth(xml_text: str, class_names: Sequence[str] = VOC_CLASSES) -> list[TruthBox]:
    root = ET.fromstring(xml_text)
    index = {name: i for i, name in enumerate(class_names)}
    boxes = []
    for obj in root.iter("object"):
        name = (obj.findtext("name") or "").strip()
        if name not in index:
            log.warning("skipping object of unknown class %r", name)
            continue
        bb = obj.find("bndbox")
        if bb is None:
            continue
        coords = tuple(float(bb.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax"))
        difficult = (obj.findtext("difficult") or "0").strip() == "1"
        boxes.append(TruthBox(index[name], coords, difficult))
    return boxes


def convert_voc(xml_dir, out_dir, class_names: Sequence[str] = VOC_CLASSES) -> int:
    """Convert every VOC annotation XML in ``xml_dir`` to a truth sidecar; returns the count."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for path in sorted(Path(xml_dir).glob("*.xml")):
        boxes = voc_xml_to_truth(path.read_text(encoding="utf-8"), class_names)
        (out / f"{path.stem}.txt").write_text(format_truth(boxes), encoding="utf-8")
        count += 1
    return count
