"""Throughput sweeps and VOC-2007 mAP evaluation."""

from .report import to_csv, to_table
from .sweep import DEFAULT_SIZES, SweepResult, end_to_end, fps_monotonic, sweep, time_backend
from .voc_map import (
    VOC_CLASSES,
    APResult,
    ScoredBox,
    TruthBox,
    convert_voc,
    evaluate_map,
    load_detections,
    load_truth_dir,
    mean_ap,
    voc07_ap,
)

__all__ = [
    "APResult", "DEFAULT_SIZES", "ScoredBox", "SweepResult", "TruthBox", "VOC_CLASSES",
    "convert_voc", "end_to_end", "evaluate_map", "fps_monotonic", "load_detections",
    "load_truth_dir", "mean_ap", "sweep", "time_backend", "to_csv", "to_table", "voc07_ap",
]
