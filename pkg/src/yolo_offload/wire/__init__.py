from .broker import Broker, BrokerCore, Forward, TopicRegistry
from .client import BrokerUnreachable, Session, parse_endpoint
from .codec import (
    DetectionMsg,
    Encoding,
    FrameDecoder,
    ImageFrame,
    MsgType,
    ProtocolError,
    WireDetection,
    decode_frame,
    encode_frame,
)

__all__ = [
    "Broker", "BrokerCore", "BrokerUnreachable", "DetectionMsg", "Encoding", "Forward",
    "FrameDecoder", "ImageFrame", "MsgType", "ProtocolError", "Session", "TopicRegistry",
    "WireDetection", "decode_frame", "encode_frame", "parse_endpoint",
]
