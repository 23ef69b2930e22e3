"""Detector backends: the real resize-forward-decode-NMS chain and a stub."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Optional, Protocol, Sequence, Union

import numpy as np

from .model import NetworkModel, forward, load_model, set_input_size
from .postproc import (
    DEFAULT_CONF_THRESHOLD,
    DEFAULT_NMS_THRESHOLD,
    Detection,
    correct_letterbox,
    decode_region,
    image_to_rgb,
    nms,
    resize_to_input,
)


class DetectorBackend(Protocol):
    input_side: int

    def detect(self, image: np.ndarray) -> list[Detection]: ...

    def with_input_size(self, side: int) -> "DetectorBackend": ...


def validate_threshold(name: str, value: float) -> float:
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")
    return value


@dataclass(frozen=True)
class ModelBackend:
    model: NetworkModel
    conf_threshold: float = DEFAULT_CONF_THRESHOLD
    nms_threshold: float = DEFAULT_NMS_THRESHOLD
    letterbox: bool = False

    def __post_init__(self):
        validate_threshold("conf_threshold", self.conf_threshold)
        validate_threshold("nms_threshold", self.nms_threshold)

    @classmethod
    def from_files(cls, cfg, weights, names=None, input_side: Optional[int] = None,
                   **kwargs) -> "ModelBackend":
        return cls(load_model(cfg, weights, names, input_side), **kwargs)

    @property
    def input_side(self) -> int:
        return self.model.input_size

    def with_input_size(self, side: int) -> "ModelBackend":
        return replace(self, model=set_input_size(self.model, side))

    def raw(self, image: np.ndarray) -> np.ndarray:
        return forward(self.model, resize_to_input(image, self.input_side, self.letterbox))

    def detect(self, image: np.ndarray) -> list[Detection]:
        pred = self.raw(image)
        m = self.model
        cands = decode_region(pred, m.anchors, m.num_classes, self.conf_threshold, m.class_names)
        if self.letterbox:
            h, w = image_to_rgb(image).shape[:2]
            cands = correct_letterbox(cands, w, h, self.input_side)
        return nms(cands, self.nms_threshold)


Script = Union[Sequence[Detection], Callable[[np.ndarray], Sequence[Detection]]]


@dataclass(frozen=True)
class StubBackend:
    """Test instrument: returns scripted detections after a fixed service time.

    ``script`` is either a fixed detection list or a callable on the image.
    The service time is slept so other threads keep running meanwhile.
    """

    script: Script = ()
    service_time: float = 0.0
    input_side: int = 416

    def with_input_size(self, side: int) -> "StubBackend":
        return replace(self, input_side=side)

    def detect(self, image: np.ndarray) -> list[Detection]:
        deadline = time.perf_counter() + self.service_time
        dets = list(self.script(image) if callable(self.script) else self.script)
        remaining = deadline - time.perf_counter()
        while remaining > 0:
            time.sleep(remaining)
            remaining = deadline - time.perf_counter()
        return dets
