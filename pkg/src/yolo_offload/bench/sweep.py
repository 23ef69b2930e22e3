"""Throughput sweep over network input sizes, in-process or through the broker."""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..pipeline import DetectorBackend

log = logging.getLogger(__name__)

DEFAULT_SIZES = (160, 224, 288, 320, 352, 384)


@dataclass(frozen=True)
class SweepResult:
    input_side: int
    frames_processed: int
    wall_seconds: float
    fps: float
    mean_inference_ms: float
    p95_inference_ms: float
    error: Optional[str] = None
    map: Optional[float] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _percentile(values: Sequence[float], q: float) -> float:
    # nearest-rank percentile
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return ordered[rank - 1]


def time_backend(backend: DetectorBackend, images: Sequence[np.ndarray], frames: int = 30,
                 warmup: int = 3) -> SweepResult:
    """Time ``frames`` end-to-end detections (resize to NMS) after ``warmup`` untimed ones."""
    if not images:
        raise ValueError("no frames")
    if frames < 1:
        raise ValueError("frames must be >= 1")
    for k in range(warmup):
        backend.detect(images[k % len(images)])
    latencies = []
    start = time.perf_counter()
    for k in range(frames):
        t0 = time.perf_counter()
        backend.detect(images[k % len(images)])
        latencies.append((time.perf_counter() - t0) * 1000.0)
    wall = time.perf_counter() - start
    return SweepResult(backend.input_side, frames, wall, frames / wall,
                       sum(latencies) / len(latencies), _percentile(latencies, 95))


def sweep(sizes: Sequence[int], images: Sequence[np.ndarray], backend: DetectorBackend,
          frames: int = 30, warmup: int = 3) -> list[SweepResult]:
    """One SweepResult per size; sizes the backend rejects become failed rows."""
    if not images:
        raise ValueError("no frames")
    if warmup < 3:
        raise ValueError("warmup must be at least 3 frames")
    results = []
    for side in sizes:
        try:
            sized = backend.with_input_size(side)
        except ValueError as exc:
            log.warning("size %d rejected: %s", side, exc)
            results.append(SweepResult(side, 0, 0.0, 0.0, 0.0, 0.0, error=str(exc)))
            continue
        result = time_backend(sized, images, frames, warmup)
        log.info("side %d: %.2f fps (mean %.1f ms)", side, result.fps, result.mean_inference_ms)
        results.append(result)
    return results


def end_to_end(backend: DetectorBackend, images: Sequence[np.ndarray], frames: int = 30,
               warmup: int = 3, endpoint: Optional[str] = None,
               timeout: float = 60.0) -> SweepResult:
    """Closed-loop timing through a broker: publish a frame, wait for its DetectionMsg.

    Starts a private broker on localhost unless ``endpoint`` is given.
    """
    from ..nodes.detector import DetectorNode
    from ..wire import Broker, DetectionMsg, ImageFrame, Session

    if not images:
        raise ValueError("no frames")
    broker = None
    if endpoint is None:
        broker = Broker().start_in_thread()
        endpoint = broker.endpoint
    got = threading.Event()
    latest: list[DetectionMsg] = []

    def on_det(body: bytes) -> None:
        latest.append(DetectionMsg.decode(body))
        got.set()

    det_session = Session.connect(endpoint, "bench-detector")
    cam_session = Session.connect(endpoint, "bench-camera")
    node = DetectorNode(backend, det_session, "bench/camera", "bench/detections")
    try:
        node.start()
        cam_session.advertise("bench/camera", "ImageFrame")
        cam_session.subscribe("bench/detections", on_det)
        time.sleep(0.05)
        latencies = []
        start = 0.0
        for k in range(warmup + frames):
            if k == warmup:
                start = time.perf_counter()
            frame = ImageFrame.from_array(k, time.time_ns(), images[k % len(images)])
            got.clear()
            t0 = time.perf_counter()
            cam_session.publish("bench/camera", frame.encode())
            if not got.wait(timeout):
                raise TimeoutError(f"no detection for frame {k} within {timeout}s")
            if k >= warmup:
                latencies.append((time.perf_counter() - t0) * 1000.0)
        wall = time.perf_counter() - start
    finally:
        node.stop()
        det_session.close()
        cam_session.close()
        if broker is not None:
            broker.stop()
    return SweepResult(backend.input_side, frames, wall, frames / wall,
                       sum(latencies) / len(latencies), _percentile(latencies, 95))


def fps_monotonic(results: Sequence[SweepResult], tolerance: float = 0.05,
                  allowed_violations: int = 1) -> bool:
    """True when fps decreases with size, allowing a few small (relative) upticks."""
    ok = [r for r in results if r.ok]
    violations = 0
    for prev, cur in zip(ok, ok[1:]):
        if cur.fps >= prev.fps:
            if cur.fps > prev.fps * (1 + tolerance):
                return False
            violations += 1
    return violations <= allowed_violations
