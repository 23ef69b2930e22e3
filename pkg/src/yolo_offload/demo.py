"""In-process orchestration of broker, camera, detector and sink."""

from __future__ import annotations

import logging
import tempfile
import threading
import time
from dataclasses import dataclass
from typing import Optional

from .nodes import CameraConfig, DetectorNode, SinkNode, run_camera
from .pipeline import DetectorBackend
from .wire import Broker, Session

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DemoConfig:
    duration: float = 5.0
    rate_hz: float = 30.0
    width: int = 640
    height: int = 480
    source: str = "pattern"
    input_side: int = 320
    out_dir: Optional[str] = None
    drain_seconds: float = 1.0

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("demo duration must be positive")


@dataclass(frozen=True)
class DemoSummary:
    duration: float
    frames_in: int
    frames_received: int
    frames_processed: int
    frames_replaced: int
    broker_dropped: int
    detections_out: int
    sink_messages: int

    @property
    def processed_fps(self) -> float:
        return self.frames_processed / self.duration

    def format(self) -> str:
        return (f"duration          {self.duration:.2f} s\n"
                f"frames in         {self.frames_in}\n"
                f"frames received   {self.frames_received}\n"
                f"frames processed  {self.frames_processed}\n"
                f"frames replaced   {self.frames_replaced}\n"
                f"broker dropped    {self.broker_dropped}\n"
                f"detections out    {self.detections_out}\n"
                f"sink messages     {self.sink_messages}\n"
                f"processed fps     {self.processed_fps:.2f}\n")


def run_demo(config: DemoConfig, backend: DetectorBackend) -> DemoSummary:
    """Run the whole pipeline for ``config.duration`` seconds and tear it down.

    Any node failing to come up stops everything already started and
    re-raises.
    """
    if backend.input_side != config.input_side:
        backend = backend.with_input_size(config.input_side)
    camera_cfg = CameraConfig(config.width, config.height, config.rate_hz, config.source)
    tmp = None
    out_dir = config.out_dir
    if out_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="yolo-offload-demo-")
        out_dir = tmp.name

    broker = Broker()
    sessions: list[Session] = []
    node: Optional[DetectorNode] = None
    sink: Optional[SinkNode] = None
    stop = threading.Event()
    camera_result: dict = {}
    try:
        broker.start_in_thread()
        sink_session = Session.connect(broker.endpoint, "sink")
        sessions.append(sink_session)
        sink = SinkNode(out_dir).attach(sink_session, "detections", camera_cfg.topic)
        det_session = Session.connect(broker.endpoint, "detector")
        sessions.append(det_session)
        node = DetectorNode(backend, det_session, camera_cfg.topic, "detections").start()
        cam_session = Session.connect(broker.endpoint, "camera")
        sessions.append(cam_session)
        time.sleep(0.05)  # let subscriptions land before the first frame

        def camera():
            try:
                camera_result["stats"] = run_camera(camera_cfg, cam_session,
                                                    duration=config.duration, stop=stop)
            except Exception as exc:
                camera_result["error"] = exc

        cam_thread = threading.Thread(target=camera, name="camera", daemon=True)
        t0 = time.perf_counter()
        cam_thread.start()
        cam_thread.join(config.duration + 10)
        elapsed = time.perf_counter() - t0
        if "error" in camera_result:
            raise camera_result["error"]
        # let the in-flight inference finish, then wait for its message at the sink
        node.stop()
        deadline = time.monotonic() + config.drain_seconds
        while time.monotonic() < deadline and sink.stats.messages < node.stats.published:
            time.sleep(0.01)
    finally:
        stop.set()
        if node is not None:
            node.stop()
        for s in sessions:
            s.close()
        broker.stop()
        if sink is not None:
            sink.close()
        if tmp is not None:
            tmp.cleanup()

    stats = camera_result["stats"]
    return DemoSummary(
        duration=elapsed,
        frames_in=stats.published,
        frames_received=node.stats.received,
        frames_processed=len(node.stats.processed),
        frames_replaced=node.slot.replaced,
        broker_dropped=broker.dropped,
        detections_out=sum(len(r["detections"]) for r in sink.records),
        sink_messages=sink.stats.messages,
    )
