"""Camera source node: publishes ImageFrames on a topic at a fixed rate."""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from ..images import list_images, read_image, synthetic_pattern
from ..postproc import bilinear_resize
from ..wire import ImageFrame, Session

log = logging.getLogger(__name__)

IMAGE_TYPE = "ImageFrame"
# Highest pixel rate the robot-side camera sustains (640x480 at ~30 Hz).
PLATFORM_PIXEL_RATE = 640 * 480 * 30


@dataclass(frozen=True)
class CameraConfig:
    width: int = 640
    height: int = 480
    rate_hz: float = 30.0
    source: str = "pattern"  # "pattern" or a directory path
    topic: str = "camera"

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera width and height must be positive")
        if self.width > 0xFFFF or self.height > 0xFFFF:
            raise ValueError("camera dimensions must fit in 16 bits")
        if not self.rate_hz > 0:
            raise ValueError(f"camera rate must be positive, got {self.rate_hz}")

    @property
    def exceeds_platform_budget(self) -> bool:
        return self.width * self.height * self.rate_hz > PLATFORM_PIXEL_RATE


@dataclass
class CameraStats:
    published: int = 0
    skipped_files: int = 0
    stamps_ns: list[int] = field(default_factory=list)


def _fit(img: np.ndarray, width: int, height: int) -> np.ndarray:
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.shape[:2] == (height, width):
        return img
    out = bilinear_resize(img.astype(np.float64), height, width)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def frame_source(config: CameraConfig, stats: Optional[CameraStats] = None
                 ) -> Iterator[np.ndarray]:
    """Endless iterator of RGB frames at the configured geometry."""
    stats = stats if stats is not None else CameraStats()
    if config.source == "pattern":
        t = 0
        while True:
            yield synthetic_pattern(config.width, config.height, t)
            t += 1
    directory = Path(config.source)
    if not directory.is_dir():
        raise ValueError(f"camera source {config.source!r} is neither 'pattern' nor a directory")
    paths = list_images(directory)
    if not paths:
        raise ValueError(f"no images in {directory}")
    cache: dict[Path, np.ndarray] = {}
    while True:
        good = 0
        for path in paths:
            if path not in cache:
                try:
                    cache[path] = _fit(read_image(path), config.width, config.height)
                except (OSError, ValueError) as exc:
                    log.warning("skipping unreadable image %s: %s", path, exc)
                    stats.skipped_files += 1
                    continue
            good += 1
            yield cache[path]
        if not good:
            raise ValueError(f"no readable images in {directory}")
        paths = [p for p in paths if p in cache]


def run_camera(config: CameraConfig, session: Session, duration: Optional[float] = None,
               max_frames: Optional[int] = None,
               stop: Optional[threading.Event] = None) -> CameraStats:
    """Publish frames until ``duration``/``max_frames`` is reached or ``stop`` is set.

    Frames are paced against an absolute schedule so per-frame jitter does
    not accumulate into drift.
    """
    if config.exceeds_platform_budget:
        log.warning("camera %dx%d at %.1f Hz exceeds the 640x480 at 30 Hz platform budget",
                    config.width, config.height, config.rate_hz)
    stats = CameraStats()
    session.advertise(config.topic, IMAGE_TYPE)
    period = 1.0 / config.rate_hz
    origin = start = time.perf_counter()
    seq = 0
    for pixels in frame_source(config, stats):
        if stop is not None and stop.is_set() or session.closed.is_set():
            break
        if max_frames is not None and seq >= max_frames:
            break
        target = start + seq * period
        if duration is not None and target - origin >= duration:
            break
        delay = target - time.perf_counter()
        if delay > 0:
            if stop is not None:
                if stop.wait(delay):
                    break
            else:
                time.sleep(delay)
        elif delay < -period:
            # fell more than a period behind; re-anchor instead of bursting
            start = time.perf_counter() - seq * period
        stamp = time.time_ns()
        frame = ImageFrame.from_array(seq & 0xFFFFFFFF, stamp, pixels)
        try:
            session.publish(config.topic, frame.encode())
        except OSError as exc:
            log.error("camera lost broker connection: %s", exc)
            break
        stats.published += 1
        stats.stamps_ns.append(stamp)
        seq += 1
    return stats
