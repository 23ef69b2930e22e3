"""CSV and aligned-text rendering of sweep and mAP results."""

from __future__ import annotations

import csv
import io
from typing import Mapping, Optional, Sequence

from .sweep import SweepResult

CSV_COLUMNS = ("input_side", "frames", "wall_s", "fps", "mean_ms", "p95_ms")


def _rows(results: Sequence[SweepResult], maps: Optional[Mapping[int, float]]):
    maps = dict(maps or {})
    for r in results:
        if r.map is not None:
            maps.setdefault(r.input_side, r.map)
    with_map = bool(maps)
    header = list(CSV_COLUMNS) + (["mAP"] if with_map else [])
    rows = []
    for r in results:
        row = [str(r.input_side), str(r.frames_processed), f"{r.wall_seconds:.4f}",
               f"{r.fps:.3f}", f"{r.mean_inference_ms:.3f}", f"{r.p95_inference_ms:.3f}"]
        if r.error is not None:
            row = [str(r.input_side), "0", "", "", "", ""]
        if with_map:
            m = maps.get(r.input_side)
            row.append("" if m is None else f"{m:.4f}")
        rows.append(row)
    return header, rows


def to_csv(results: Sequence[SweepResult], maps: Optional[Mapping[int, float]] = None) -> str:
    """CSV with one row per sweep size; an ``mAP`` column is joined on input side when known."""
    header, rows = _rows(results, maps)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def to_table(results: Sequence[SweepResult], maps: Optional[Mapping[int, float]] = None) -> str:
    header, rows = _rows(results, maps)
    labels = {"input_side": "input size", "frames": "frames", "wall_s": "wall [s]",
              "fps": "speed [FPS]", "mean_ms": "mean [ms]", "p95_ms": "p95 [ms]", "mAP": "mAP"}
    header = [labels[h] for h in header]
    display = []
    for r, row in zip(results, rows):
        row = list(row)
        row[0] = f"{r.input_side}x{r.input_side}"
        if r.error is not None:
            row[1] = f"failed: {r.error}"
        display.append(row)
    widths = [max(len(c) for c in col) for col in zip(header, *display)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in display]
    return "\n".join(lines) + "\n"
