"""Pipeline executables: camera source, detector and sink."""

from .camera import CameraConfig, CameraStats, frame_source, run_camera
from .detector import DetectorConfig, DetectorNode, DetectorStats, LatestSlot, run_detector
from .sink import SinkNode, SinkStats, run_sink

__all__ = [
    "CameraConfig", "CameraStats", "DetectorConfig", "DetectorNode", "DetectorStats",
    "LatestSlot", "SinkNode", "SinkStats", "frame_source", "run_camera", "run_detector",
    "run_sink",
]
