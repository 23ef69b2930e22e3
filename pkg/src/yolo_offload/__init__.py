"""Offloaded tiny-YOLO detection over a pub/sub broker.

A camera node streams frames through a broker to a detector node running a
Darknet-configured tiny-YOLOv2 network on CPU; detections flow back to a sink.
"""

from .model import InputResolution, NetworkModel, load_model, parse_cfg, set_input_size
from .pipeline import ModelBackend, StubBackend
from .postproc import BBox, Detection, decode_region, iou, nms, resize_to_input

__version__ = "0.1.0"

__all__ = [
    "BBox", "Detection", "InputResolution", "ModelBackend", "NetworkModel", "StubBackend",
    "decode_region", "iou", "load_model", "nms", "parse_cfg", "resize_to_input",
    "set_input_size",
]
