"""Detector node: latest-wins frame intake, inference, DetectionMsg publishing."""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..model import InputResolution
from ..pipeline import DetectorBackend, ModelBackend, validate_threshold
from ..postproc import DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_THRESHOLD
from ..wire import DetectionMsg, ImageFrame, Session, WireDetection

log = logging.getLogger(__name__)

DETECTION_TYPE = "DetectionMsg"


@dataclass(frozen=True)
class DetectorConfig:
    cfg_path: Optional[str] = None
    weights_path: Optional[str] = None
    names_path: Optional[str] = None
    input_side: int = 416
    conf_threshold: float = DEFAULT_CONF_THRESHOLD
    nms_threshold: float = DEFAULT_NMS_THRESHOLD
    in_topic: str = "camera"
    out_topic: str = "detections"

    def __post_init__(self):
        InputResolution(self.input_side)
        validate_threshold("conf_threshold", self.conf_threshold)
        validate_threshold("nms_threshold", self.nms_threshold)

    def build_backend(self) -> DetectorBackend:
        if not (self.cfg_path and self.weights_path):
            raise ValueError("detector needs both a cfg and a weights path")
        return ModelBackend.from_files(self.cfg_path, self.weights_path, self.names_path,
                                       self.input_side, conf_threshold=self.conf_threshold,
                                       nms_threshold=self.nms_threshold)


class LatestSlot:
    """Depth-1 buffer: a new item replaces any unconsumed one."""

    def __init__(self):
        self._cond = threading.Condition()
        self._item = None
        self._has_item = False
        self.replaced = 0
        self.max_depth = 0

    def put(self, item) -> None:
        with self._cond:
            if self._has_item:
                self.replaced += 1
            self._item = item
            self._has_item = True
            self.max_depth = max(self.max_depth, 1)
            self._cond.notify()

    def take(self, timeout: Optional[float] = None):
        """Return the pending item, or None after ``timeout`` seconds."""
        with self._cond:
            if not self._cond.wait_for(lambda: self._has_item, timeout):
                return None
            item, self._item, self._has_item = self._item, None, False
            return item

    def __len__(self) -> int:
        return int(self._has_item)


@dataclass
class ProcessedRecord:
    seq: int
    stamp_ns: int
    dequeue_ns: int
    inference_ms: float
    done_ns: int = 0

    @property
    def age_ms(self) -> float:
        """Frame age when its detections were ready, from the camera stamp."""
        return (self.done_ns - self.stamp_ns) / 1e6


@dataclass
class DetectorStats:
    received: int = 0
    malformed: int = 0
    published: int = 0
    processed: list[ProcessedRecord] = field(default_factory=list)


def to_wire(dets) -> tuple[WireDetection, ...]:
    out = []
    for d in dets:
        b = d.box
        prob = float(np.float32(min(1.0, max(0.0, d.prob))))
        out.append(WireDetection(d.class_id, prob, b.cx, b.cy, b.w, b.h, d.label))
    return tuple(out)


class DetectorNode:
    """Receive on ``in_topic``, detect on a worker thread, publish on ``out_topic``."""

    def __init__(self, backend: DetectorBackend, session: Session,
                 in_topic: str = "camera", out_topic: str = "detections"):
        self.backend = backend
        self.session = session
        self.in_topic = in_topic
        self.out_topic = out_topic
        self.slot = LatestSlot()
        self.stats = DetectorStats()
        self._stop = threading.Event()
        self._worker = threading.Thread(target=self._run, name="detector-worker", daemon=True)

    @classmethod
    def from_config(cls, config: DetectorConfig, session: Session,
                    backend: Optional[DetectorBackend] = None) -> "DetectorNode":
        backend = backend if backend is not None else config.build_backend()
        if backend.input_side != config.input_side:
            backend = backend.with_input_size(config.input_side)
        return cls(backend, session, config.in_topic, config.out_topic)

    def start(self) -> "DetectorNode":
        self.session.advertise(self.out_topic, DETECTION_TYPE)
        self.session.subscribe(self.in_topic, self._on_frame)
        self._worker.start()
        return self

    def _on_frame(self, body: bytes) -> None:
        self.stats.received += 1
        self.slot.put(body)

    def _run(self) -> None:
        while not self._stop.is_set():
            body = self.slot.take(timeout=0.05)
            if body is None:
                continue
            dequeue_ns = time.time_ns()
            try:
                frame = ImageFrame.decode(body)
            except ValueError as exc:
                self.stats.malformed += 1
                log.warning("dropping malformed ImageFrame: %s", exc)
                continue
            t0 = time.perf_counter()
            try:
                dets = self.backend.detect(frame.to_array())
            except Exception:
                log.exception("inference failed on frame %d", frame.seq)
                continue
            inference_ms = (time.perf_counter() - t0) * 1000.0
            done_ns = time.time_ns()
            msg = DetectionMsg(frame.seq, frame.stamp_ns, inference_ms, to_wire(dets))
            self.stats.processed.append(
                ProcessedRecord(frame.seq, frame.stamp_ns, dequeue_ns, inference_ms, done_ns))
            try:
                self.session.publish(self.out_topic, msg.encode())
            except OSError as exc:
                log.error("detector lost broker connection: %s", exc)
                break
            self.stats.published += 1

    def stop(self) -> None:
        self._stop.set()
        if self._worker.is_alive():
            self._worker.join(timeout=5)


def run_detector(config: DetectorConfig, session: Session,
                 backend: Optional[DetectorBackend] = None,
                 duration: Optional[float] = None,
                 stop: Optional[threading.Event] = None) -> DetectorStats:
    node = DetectorNode.from_config(config, session, backend).start()
    stop = stop if stop is not None else threading.Event()
    try:
        deadline = None if duration is None else time.monotonic() + duration
        while not stop.is_set() and not session.closed.is_set():
            if deadline is not None and time.monotonic() >= deadline:
                break
            stop.wait(0.05)
    finally:
        node.stop()
    return node.stats
