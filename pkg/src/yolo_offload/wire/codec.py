"""Length-prefixed binary framing and message bodies.

Frame layout (all integers little-endian)::

    'R' 'P' | u32 payload length | u8 msg type | payload

Control bodies carry strings as u16 length + UTF-8 bytes.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MAGIC = b"RP"
HEADER = struct.Struct("<2sIB")
HEADER_SIZE = HEADER.size
DEFAULT_MAX_FRAME = 16 * 1024 * 1024
MAX_PAYLOAD = 2 ** 32 - 1


class MsgType(enum.IntEnum):
    ADVERTISE = 0x01
    SUBSCRIBE = 0x02
    DATA = 0x03
    NACK = 0x7F


class ProtocolError(Exception):
    """Unrecoverable framing error; the connection must be torn down."""


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    if not 0 <= msg_type <= 0xFF:
        raise ValueError(f"message type {msg_type} does not fit in a byte")
    if len(payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(payload)} bytes exceeds the 32-bit length field")
    return HEADER.pack(MAGIC, len(payload), msg_type) + bytes(payload)


def decode_frame(buf: bytes, max_size: int = DEFAULT_MAX_FRAME
                 ) -> Optional[tuple[int, bytes, int]]:
    """Decode one frame from the front of ``buf``.

    Returns ``(msg_type, payload, consumed)`` or None while the frame is still
    incomplete. Bad magic or an oversize length raise :class:`ProtocolError`.
    """
    head = bytes(buf[:2])
    if head != MAGIC[:len(head)]:
        raise ProtocolError(f"bad magic {head!r}")
    if len(buf) < HEADER_SIZE:
        return None
    _, length, msg_type = HEADER.unpack_from(buf, 0)
    if length > max_size:
        raise ProtocolError(f"declared length {length} exceeds maximum {max_size}")
    end = HEADER_SIZE + length
    if len(buf) < end:
        return None
    return msg_type, bytes(buf[HEADER_SIZE:end]), end


class FrameDecoder:
    """Incremental decoder for a byte stream; safe to feed arbitrary chunks."""

    def __init__(self, max_size: int = DEFAULT_MAX_FRAME):
        self.max_size = max_size
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple[int, bytes]]:
        self._buf += data
        frames = []
        while True:
            result = decode_frame(self._buf, self.max_size)
            if result is None:
                return frames
            msg_type, payload, consumed = result
            del self._buf[:consumed]
            frames.append((msg_type, payload))

    @property
    def buffered(self) -> int:
        return len(self._buf)


def pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for u16 length prefix")
    return struct.pack("<H", len(raw)) + raw


def unpack_str(buf: bytes, offset: int = 0) -> tuple[str, int]:
    if len(buf) < offset + 2:
        raise ValueError("truncated string length")
    (n,) = struct.unpack_from("<H", buf, offset)
    end = offset + 2 + n
    if len(buf) < end:
        raise ValueError("truncated string")
    return bytes(buf[offset + 2:end]).decode("utf-8"), end


def advertise_body(topic: str, type_name: str) -> bytes:
    return pack_str(topic) + pack_str(type_name)


def subscribe_body(topic: str) -> bytes:
    return pack_str(topic)


def data_body(topic: str, body: bytes) -> bytes:
    return pack_str(topic) + bytes(body)


def nack_body(msg_type: int, topic: str, reason: str) -> bytes:
    return bytes([msg_type]) + pack_str(topic) + pack_str(reason)


def parse_advertise(payload: bytes) -> tuple[str, str]:
    topic, off = unpack_str(payload)
    type_name, off = unpack_str(payload, off)
    return topic, type_name


def parse_subscribe(payload: bytes) -> str:
    return unpack_str(payload)[0]


def parse_data(payload: bytes) -> tuple[str, bytes]:
    topic, off = unpack_str(payload)
    return topic, payload[off:]


@dataclass(frozen=True)
class Nack:
    msg_type: int
    topic: str
    reason: str


def parse_nack(payload: bytes) -> Nack:
    if not payload:
        raise ValueError("empty NACK body")
    topic, off = unpack_str(payload, 1)
    reason, _ = unpack_str(payload, off)
    return Nack(payload[0], topic, reason)


class Encoding(enum.IntEnum):
    RGB8 = 0
    GRAY8 = 1

    @property
    def channels(self) -> int:
        return 3 if self is Encoding.RGB8 else 1


IMAGE_HEADER = struct.Struct("<IQHHB")


@dataclass(frozen=True)
class ImageFrame:
    seq: int
    stamp_ns: int
    width: int
    height: int
    encoding: Encoding
    pixels: bytes = field(repr=False)

    def __post_init__(self):
        expected = self.width * self.height * Encoding(self.encoding).channels
        if len(self.pixels) != expected:
            raise ValueError(f"pixel payload is {len(self.pixels)} bytes, expected {expected}")

    @classmethod
    def from_array(cls, seq: int, stamp_ns: int, pixels: np.ndarray) -> "ImageFrame":
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        if pixels.ndim == 2:
            enc = Encoding.GRAY8
        elif pixels.ndim == 3 and pixels.shape[2] == 3:
            enc = Encoding.RGB8
        else:
            raise ValueError(f"unsupported image array shape {pixels.shape}")
        h, w = pixels.shape[:2]
        return cls(seq, stamp_ns, w, h, enc, pixels.tobytes())

    def to_array(self) -> np.ndarray:
        arr = np.frombuffer(self.pixels, dtype=np.uint8)
        if self.encoding == Encoding.RGB8:
            return arr.reshape(self.height, self.width, 3)
        return arr.reshape(self.height, self.width)

    def encode(self) -> bytes:
        return IMAGE_HEADER.pack(self.seq, self.stamp_ns, self.width, self.height,
                                 int(self.encoding)) + self.pixels

    @classmethod
    def decode(cls, buf: bytes) -> "ImageFrame":
        if len(buf) < IMAGE_HEADER.size:
            raise ValueError("truncated ImageFrame header")
        seq, stamp, w, h, enc = IMAGE_HEADER.unpack_from(buf, 0)
        try:
            enc = Encoding(enc)
        except ValueError:
            raise ValueError(f"unknown encoding {enc}") from None
        return cls(seq, stamp, w, h, enc, bytes(buf[IMAGE_HEADER.size:]))


DET_HEADER = struct.Struct("<IQdI")
DET_ENTRY = struct.Struct("<Hfffff")


@dataclass(frozen=True)
class WireDetection:
    class_id: int
    prob: float
    cx: float
    cy: float
    w: float
    h: float
    label: str = ""


@dataclass(frozen=True)
class DetectionMsg:
    src_seq: int
    stamp_ns: int
    inference_ms: float
    detections: tuple[WireDetection, ...] = ()

    def encode(self) -> bytes:
        parts = [DET_HEADER.pack(self.src_seq, self.stamp_ns, self.inference_ms,
                                 len(self.detections))]
        for d in self.detections:
            if not 0.0 <= d.prob <= 1.0:
                raise ValueError(f"detection prob {d.prob} outside [0, 1]")
            parts.append(DET_ENTRY.pack(d.class_id, d.prob, d.cx, d.cy, d.w, d.h))
            parts.append(pack_str(d.label))
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes) -> "DetectionMsg":
        if len(buf) < DET_HEADER.size:
            raise ValueError("truncated DetectionMsg header")
        src_seq, stamp, inf_ms, count = DET_HEADER.unpack_from(buf, 0)
        off = DET_HEADER.size
        dets = []
        for _ in range(count):
            if len(buf) < off + DET_ENTRY.size:
                raise ValueError("truncated detection entry")
            class_id, prob, cx, cy, w, h = DET_ENTRY.unpack_from(buf, off)
            label, off = unpack_str(buf, off + DET_ENTRY.size)
            dets.append(WireDetection(class_id, prob, cx, cy, w, h, label))
        if off != len(buf):
            raise ValueError(f"{len(buf) - off} trailing bytes after DetectionMsg")
        return cls(src_seq, stamp, inf_ms, tuple(dets))
