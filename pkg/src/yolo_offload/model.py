"""Darknet cfg/weights loading and the multi-resolution forward pass."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .nnet import (
    DTYPE,
    BatchNorm,
    ConvParams,
    PoolParams,
    ShapeError,
    as_tensor,
    conv2d,
    conv_output_size,
    fold_batchnorm,
    maxpool2d,
    pool_output_size,
)

SUPPORTED_SECTIONS = ("net", "convolutional", "maxpool", "region")
# Known Darknet layers this engine deliberately does not implement.
UNSUPPORTED_SECTIONS = (
    "route", "reorg", "shortcut", "upsample", "yolo", "connected", "dropout",
    "avgpool", "softmax", "detection", "cost", "local", "crnn", "rnn", "gru",
    "lstm", "crop", "deconvolutional", "batchnorm", "normalization",
)

SUPPORTED_VERSIONS = ((0, 1), (0, 2), (1, 0))

MIN_INPUT_SIDE = 64
DOWNSAMPLE = 32


class CfgParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class WeightsError(ValueError):
    pass


class UnsupportedVersionError(WeightsError):
    pass


@dataclass
class LayerSpec:
    kind: str
    attributes: dict[str, str] = field(default_factory=dict)
    line: int = field(default=0, compare=False)

    def get_int(self, key: str, default: Optional[int] = None) -> int:
        if key not in self.attributes:
            if default is None:
                raise CfgParseError(f"[{self.kind}] missing required key {key!r}", self.line)
            return default
        try:
            return int(self.attributes[key])
        except ValueError:
            raise CfgParseError(f"[{self.kind}] {key}={self.attributes[key]!r} is not an integer",
                                self.line) from None

    def get_floats(self, key: str) -> list[float]:
        raw = self.attributes.get(key, "")
        return [float(v) for v in raw.split(",") if v.strip()]


def parse_cfg(text: str) -> list[LayerSpec]:
    """Parse Darknet cfg text into ordered section specs."""
    specs: list[LayerSpec] = []
    current: Optional[LayerSpec] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise CfgParseError(f"malformed section header {line!r}", lineno)
            kind = line[1:-1].strip()
            if kind in UNSUPPORTED_SECTIONS:
                raise CfgParseError(f"unsupported layer [{kind}]", lineno)
            if kind not in SUPPORTED_SECTIONS:
                raise CfgParseError(f"unknown section [{kind}]", lineno)
            if not specs and kind != "net":
                raise CfgParseError("missing [net] section", lineno)
            if specs and kind == "net":
                raise CfgParseError("[net] may only appear once, as the first section", lineno)
            current = LayerSpec(kind, {}, lineno)
            specs.append(current)
            continue
        if current is None:
            raise CfgParseError("key=value line before any section", lineno)
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise CfgParseError(f"malformed line {line!r}", lineno)
        if key in current.attributes:
            raise CfgParseError(f"duplicate key {key!r} in [{current.kind}]", lineno)
        current.attributes[key] = value
    if not specs:
        raise CfgParseError("missing [net] section")
    return specs


def serialize_cfg(specs: Sequence[LayerSpec]) -> str:
    parts = []
    for spec in specs:
        lines = [f"[{spec.kind}]"] + [f"{k}={v}" for k, v in spec.attributes.items()]
        parts.append("\n".join(lines))
    return "\n\n".join(parts) + "\n"


def load_names(path: Union[str, Path]) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return [line.strip() for line in text.splitlines() if line.strip()]


@dataclass(frozen=True)
class InputResolution:
    side: int
    n: Optional[int] = None

    def __post_init__(self):
        if self.side <= 0 or self.side % DOWNSAMPLE:
            raise ValueError(f"input side must be a positive multiple of 32, got {self.side}")

    @classmethod
    def from_schedule(cls, n: int) -> "InputResolution":
        """Side 320 + 32*n, the multi-scale schedule the detector was trained on."""
        if n < 0:
            raise ValueError("n must be >= 0")
        return cls(320 + 32 * n, n)


@dataclass(frozen=True)
class ConvLayer:
    params: ConvParams
    kind: str = "convolutional"


@dataclass(frozen=True)
class PoolLayer:
    params: PoolParams
    kind: str = "maxpool"


@dataclass(frozen=True)
class RegionLayer:
    anchors: tuple[tuple[float, float], ...]
    num_classes: int
    coords: int = 4
    kind: str = "region"


@dataclass(frozen=True)
class NetworkModel:
    """A loaded network. Immutable; ``with_input_size`` returns a new model."""

    layers: tuple
    input_size: int
    channels: int
    anchors: tuple[tuple[float, float], ...]
    num_classes: int
    class_names: tuple[str, ...]
    layer_shapes: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        if self.input_size % DOWNSAMPLE or self.input_size < MIN_INPUT_SIDE:
            raise ValueError(f"input size must be a multiple of 32 and >= {MIN_INPUT_SIDE}, "
                             f"got {self.input_size}")
        if not self.layers or not isinstance(self.layers[-1], RegionLayer):
            raise ValueError("final layer must be a region layer")
        if len(self.class_names) != self.num_classes:
            raise ValueError(f"{len(self.class_names)} class names for {self.num_classes} classes")
        if not self.layer_shapes:
            object.__setattr__(self, "layer_shapes", _infer_shapes(
                self.layers, self.channels, self.input_size))

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)

    @property
    def grid(self) -> int:
        return self.layer_shapes[-1][1]

    @property
    def output_channels(self) -> int:
        return self.num_anchors * (5 + self.num_classes)

    def with_input_size(self, res: Union[InputResolution, int]) -> "NetworkModel":
        return set_input_size(self, res)

    def parameter_checksum(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                h.update(layer.params.weights.tobytes())
                h.update(np.asarray(layer.params.bias, dtype=DTYPE).tobytes())
        return h.hexdigest()

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return forward(self, image)


def _infer_shapes(layers, channels: int, side: int) -> tuple[tuple[int, int, int], ...]:
    c, h, w = channels, side, side
    shapes = []
    for idx, layer in enumerate(layers):
        if isinstance(layer, ConvLayer):
            p = layer.params
            if p.in_channels != c:
                raise ShapeError(f"expected {p.in_channels} input channels, got {c}",
                                 layer=idx, expected=p.in_channels, actual=c)
            h = conv_output_size(h, p.kernel_size, p.stride, p.padding)
            w = conv_output_size(w, p.kernel_size, p.stride, p.padding)
            c = p.out_channels
        elif isinstance(layer, PoolLayer):
            h = pool_output_size(h, layer.params.stride)
            w = pool_output_size(w, layer.params.stride)
        elif isinstance(layer, RegionLayer):
            expected = len(layer.anchors) * (layer.coords + 1 + layer.num_classes)
            if c != expected:
                raise ShapeError(f"region expects {expected} channels, got {c}",
                                 layer=idx, expected=expected, actual=c)
        if h < 1 or w < 1:
            raise ShapeError(f"spatial size collapsed to {h}x{w}", layer=idx)
        shapes.append((c, h, w))
    return tuple(shapes)


def _conv_geometry(spec: LayerSpec) -> tuple[int, int, int, int, bool, str]:
    filters = spec.get_int("filters")
    size = spec.get_int("size", 1)
    stride = spec.get_int("stride", 1)
    # Darknet: pad=1 means "same" padding of size//2, overriding padding=.
    padding = spec.get_int("padding", 0)
    if spec.get_int("pad", 0):
        padding = size // 2
    bn = bool(spec.get_int("batch_normalize", 0))
    activation = spec.attributes.get("activation", "logistic")
    if activation not in ("linear", "leaky"):
        raise CfgParseError(f"unsupported activation {activation!r}", spec.line)
    if filters < 1 or size < 1 or stride < 1:
        raise CfgParseError("filters, size and stride must be positive", spec.line)
    return filters, size, stride, padding, bn, activation


def expected_float_count(specs: Sequence[LayerSpec]) -> int:
    """Number of float32 parameters the weights file must hold for ``specs``."""
    channels = specs[0].get_int("channels", 3)
    total = 0
    for spec in specs[1:]:
        if spec.kind != "convolutional":
            continue
        filters, size, _, _, bn, _ = _conv_geometry(spec)
        total += filters * (4 if bn else 1) + filters * channels * size * size
        channels = filters
    return total


def synthetic_weights(specs: Sequence[LayerSpec], seed: int = 0,
                      version: tuple[int, int, int] = (0, 2, 0)) -> bytes:
    """Random but well-conditioned weights in Darknet file layout.

    He-scaled filters and unit-ish batch-norm statistics keep activations in a
    sane range through the stack. Intended for tests and benchmarking only.
    """
    rng = np.random.default_rng(seed)
    major, minor, revision = version
    header = struct.pack("<3i", major, minor, revision)
    header += struct.pack("<q" if major * 10 + minor >= 2 else "<i", 0)
    chunks = []
    channels = specs[0].get_int("channels", 3)
    for spec in specs[1:]:
        if spec.kind != "convolutional":
            continue
        filters, size, _, _, bn, _ = _conv_geometry(spec)
        chunks.append(rng.normal(0.0, 0.1, filters))
        if bn:
            chunks.append(rng.uniform(0.8, 1.2, filters))
            chunks.append(rng.normal(0.0, 0.1, filters))
            chunks.append(rng.uniform(0.5, 1.5, filters))
        fan_in = channels * size * size
        chunks.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), filters * fan_in))
        channels = filters
    body = np.concatenate(chunks).astype("<f4") if chunks else np.zeros(0, "<f4")
    return header + body.tobytes()


def _read_header(buf: bytes) -> tuple[tuple[int, int, int], int, int]:
    if len(buf) < 12:
        raise WeightsError(f"weights file too short for header ({len(buf)} bytes)")
    major, minor, revision = struct.unpack_from("<3i", buf, 0)
    if (major, minor) not in SUPPORTED_VERSIONS:
        raise UnsupportedVersionError(
            f"unsupported weights version {major}.{minor}.{revision}")
    wide_seen = major * 10 + minor >= 2
    seen_size = 8 if wide_seen else 4
    if len(buf) < 12 + seen_size:
        raise WeightsError("weights file too short for 'seen' counter")
    (seen,) = struct.unpack_from("<q" if wide_seen else "<i", buf, 12)
    return (major, minor, revision), seen, 12 + seen_size


def build_model(specs: Sequence[LayerSpec], weights: Optional[bytes] = None,
                class_names: Optional[Sequence[str]] = None,
                input_size: Optional[int] = None) -> NetworkModel:
    """Build a model from parsed specs.

    With ``weights=None`` all parameters are zero, which is only useful for
    tests and shape checks.
    """
    if not specs or specs[0].kind != "net":
        raise CfgParseError("missing [net] section")
    net = specs[0]
    channels = net.get_int("channels", 3)
    side = input_size if input_size is not None else net.get_int("width", 416)
    if net.get_int("height", side) != net.get_int("width", side):
        raise CfgParseError("only square network inputs are supported", net.line)

    if weights is not None:
        _, _, offset = _read_header(weights)
        body = weights[offset:]
        if len(body) % 4:
            raise WeightsError(f"weights body is {len(body)} bytes, not a whole number of floats")
        floats = np.frombuffer(body, dtype="<f4")
        expected = expected_float_count(specs)
        if floats.size != expected:
            diff = floats.size - expected
            kind = "trailing" if diff > 0 else "missing"
            raise WeightsError(
                f"expected {expected} floats, file holds {floats.size} ({abs(diff)} {kind})")
    else:
        floats = np.zeros(expected_float_count(specs), dtype=DTYPE)

    pos = 0

    def take(n: int) -> np.ndarray:
        nonlocal pos
        chunk = floats[pos:pos + n].astype(DTYPE)
        pos += n
        return chunk

    layers: list = []
    c = channels
    region: Optional[RegionLayer] = None
    for spec in specs[1:]:
        if region is not None:
            raise CfgParseError("region must be the final layer", spec.line)
        if spec.kind == "convolutional":
            filters, size, stride, padding, bn, activation = _conv_geometry(spec)
            bias = take(filters)
            batchnorm = None
            if bn:
                gamma, mean, var = take(filters), take(filters), take(filters)
                if np.any(var < 0):
                    raise WeightsError(f"negative batchnorm variance in layer {len(layers)}")
                batchnorm = BatchNorm(gamma=gamma, beta=bias, mean=mean, variance=var)
                bias = np.zeros(filters, dtype=DTYPE)
            w = take(filters * c * size * size).reshape(filters, c, size, size)
            params = ConvParams(weights=w, bias=bias, stride=stride, padding=padding,
                                activation=activation, batchnorm=batchnorm)
            if batchnorm is not None:
                params = fold_batchnorm(params)
            layers.append(ConvLayer(params))
            c = filters
        elif spec.kind == "maxpool":
            size = spec.get_int("size", 1)
            layers.append(PoolLayer(PoolParams(size=size, stride=spec.get_int("stride", size))))
        elif spec.kind == "region":
            vals = spec.get_floats("anchors")
            num = spec.get_int("num", len(vals) // 2)
            if len(vals) != 2 * num:
                raise CfgParseError(f"{len(vals)} anchor values for num={num}", spec.line)
            coords = spec.get_int("coords", 4)
            if coords != 4:
                raise CfgParseError("only coords=4 is supported", spec.line)
            region = RegionLayer(anchors=tuple(zip(vals[0::2], vals[1::2])),
                                 num_classes=spec.get_int("classes"), coords=coords)
            layers.append(region)
    if region is None:
        raise CfgParseError("final layer must be [region]")

    names = tuple(class_names) if class_names is not None else tuple(
        str(i) for i in range(region.num_classes))
    return NetworkModel(layers=tuple(layers), input_size=side, channels=channels,
                        anchors=region.anchors, num_classes=region.num_classes,
                        class_names=names)


def load_weights(specs: Sequence[LayerSpec], data: bytes,
                 class_names: Optional[Sequence[str]] = None) -> NetworkModel:
    return build_model(specs, data, class_names)


def load_model(cfg_path: Union[str, Path], weights_path: Union[str, Path],
               names_path: Union[str, Path, None] = None,
               input_size: Optional[int] = None) -> NetworkModel:
    specs = parse_cfg(Path(cfg_path).read_text(encoding="utf-8"))
    names = load_names(names_path) if names_path else None
    model = build_model(specs, Path(weights_path).read_bytes(), names)
    return set_input_size(model, input_size) if input_size else model


def set_input_size(model: NetworkModel, res: Union[InputResolution, int]) -> NetworkModel:
    side = res.side if isinstance(res, InputResolution) else InputResolution(int(res)).side
    return replace(model, input_size=side, layer_shapes=())


def forward(model: NetworkModel, image: np.ndarray) -> np.ndarray:
    """Run one pass; returns the raw region tensor (1, A*(5+C), S/32, S/32)."""
    x = as_tensor(image)
    expected = (1, model.channels, model.input_size, model.input_size)
    if x.shape != expected:
        raise ShapeError(f"input shape {x.shape} does not match {expected}",
                         layer=0, expected=expected, actual=x.shape)
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, ConvLayer):
            x = conv2d(x, layer.params, layer=idx)
        elif isinstance(layer, PoolLayer):
            x = maxpool2d(x, layer.params)
    return x
