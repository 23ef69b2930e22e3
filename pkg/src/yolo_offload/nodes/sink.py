"""Sink node: joins detections to their frames, writes annotated images and a JSONL log."""

from __future__ import annotations

import collections
import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..images import draw_detections, write_pnm
from ..wire import DetectionMsg, ImageFrame, Session

log = logging.getLogger(__name__)

FRAME_RING = 64
LOG_NAME = "detections.jsonl"


@dataclass
class SinkStats:
    frames: int = 0
    messages: int = 0
    detections: int = 0
    annotated: int = 0
    frame_missing: int = 0
    malformed: int = 0


def detection_record(msg: DetectionMsg, frame_missing: bool = False) -> dict:
    record = {
        "seq": msg.src_seq,
        "stamp_ns": msg.stamp_ns,
        "inference_ms": msg.inference_ms,
        "count": len(msg.detections),
        "detections": [
            {"class_id": d.class_id, "label": d.label, "prob": d.prob,
             "box": [d.cx, d.cy, d.w, d.h]}
            for d in msg.detections
        ],
    }
    if frame_missing:
        record["frame_missing"] = True
    return record


class SinkNode:
    def __init__(self, out_dir, emit_empty: bool = False, ring: int = FRAME_RING):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.emit_empty = emit_empty
        self.ring_size = ring
        self._frames: collections.OrderedDict[int, ImageFrame] = collections.OrderedDict()
        self._lock = threading.Lock()
        self._log = open(self.out_dir / LOG_NAME, "a", encoding="utf-8")
        self.stats = SinkStats()
        self.records: list[dict] = []

    def attach(self, session: Session, in_topic: str = "detections",
               image_topic: str = "camera") -> "SinkNode":
        session.subscribe(image_topic, self.on_frame)
        session.subscribe(in_topic, self.on_detections)
        return self

    def on_frame(self, body: bytes) -> None:
        try:
            frame = ImageFrame.decode(body)
        except ValueError as exc:
            self.stats.malformed += 1
            log.warning("sink dropping malformed frame: %s", exc)
            return
        with self._lock:
            self._frames[frame.seq] = frame
            self._frames.move_to_end(frame.seq)
            while len(self._frames) > self.ring_size:
                self._frames.popitem(last=False)
            self.stats.frames += 1

    def on_detections(self, body: bytes) -> None:
        try:
            msg = DetectionMsg.decode(body)
        except ValueError as exc:
            self.stats.malformed += 1
            log.warning("sink dropping malformed DetectionMsg: %s", exc)
            return
        self.handle(msg)

    def handle(self, msg: DetectionMsg) -> dict:
        with self._lock:
            frame = self._frames.get(msg.src_seq)
        record = detection_record(msg, frame_missing=frame is None)
        if frame is None:
            self.stats.frame_missing += 1
            log.info("no retained frame for seq %d; logging only", msg.src_seq)
        elif msg.detections or self.emit_empty:
            image = draw_detections(frame.to_array(), msg.detections)
            write_pnm(self.out_dir / f"frame_{msg.src_seq:08d}.ppm", image)
            self.stats.annotated += 1
        with self._lock:
            if not self._log.closed:
                self._log.write(json.dumps(record) + "\n")
                self._log.flush()
        self.stats.messages += 1
        self.stats.detections += len(msg.detections)
        self.records.append(record)
        return record

    def close(self) -> None:
        with self._lock:
            self._log.close()


def run_sink(session: Session, out_dir, in_topic: str = "detections",
             image_topic: str = "camera", emit_empty: bool = False,
             duration: Optional[float] = None,
             stop: Optional[threading.Event] = None) -> SinkStats:
    node = SinkNode(out_dir, emit_empty).attach(session, in_topic, image_topic)
    stop = stop if stop is not None else threading.Event()
    deadline = None if duration is None else time.monotonic() + duration
    try:
        while not stop.is_set() and not session.closed.is_set():
            if deadline is not None and time.monotonic() >= deadline:
                break
            stop.wait(0.05)
    finally:
        node.close()
    return node.stats
