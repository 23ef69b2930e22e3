from __future__ import annotations

import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import wait_until
from yolo_offload.wire import (Broker, BrokerUnreachable, DetectionMsg, FrameDecoder, ImageFrame,
                               MsgType, ProtocolError, Session, WireDetection, decode_frame,
                               encode_frame)
from yolo_offload.wire import codec
from yolo_offload.wire.broker import BrokerCore, TopicRegistry

ROUND_TRIPS = 10_000


def test_empty_data_frame_bytes():
    assert encode_frame(MsgType.DATA, b"") == bytes([0x52, 0x50, 0, 0, 0, 0, 0x03])


def test_vga_image_frame_size():
    frame = ImageFrame.from_array(0, 0, np.zeros((480, 640, 3), np.uint8))
    assert len(encode_frame(MsgType.DATA, frame.encode())) == 7 + 17 + 921600


def test_incomplete_frame_keeps_prefix():
    full = encode_frame(MsgType.DATA, b"hello")
    dec = FrameDecoder()
    assert dec.feed(full[:-1]) == []
    assert dec.buffered == len(full) - 1
    assert dec.feed(full[-1:]) == [(MsgType.DATA, b"hello")]
    assert dec.buffered == 0
    assert decode_frame(full[:3]) is None


@pytest.mark.parametrize("data", [b"XP\0\0\0\0\3", b"X", b"RX"])
def test_bad_magic(data):
    with pytest.raises(ProtocolError):
        decode_frame(data)


def test_oversize_frame_rejected():
    header = struct.pack("<2sIB", b"RP", 100, 3)
    with pytest.raises(ProtocolError):
        decode_frame(header, max_size=99)


def test_random_round_trips():
    rng = np.random.default_rng(31)
    for _ in range(ROUND_TRIPS):
        payload = rng.bytes(int(rng.integers(0, 300)))
        msg_type = int(rng.integers(0, 256))
        frame = encode_frame(msg_type, payload)
        assert decode_frame(frame) == (msg_type, payload, len(frame))


def test_byte_at_a_time_matches_bulk():
    rng = np.random.default_rng(32)
    msgs = [(int(rng.integers(0, 256)), rng.bytes(int(rng.integers(0, 64)))) for _ in range(300)]
    stream = b"".join(encode_frame(t, p) for t, p in msgs)
    bulk = FrameDecoder().feed(stream)
    dec = FrameDecoder()
    trickled = []
    for i in range(len(stream)):
        trickled += dec.feed(stream[i:i + 1])
    assert bulk == trickled == msgs


@given(st.lists(st.tuples(st.integers(0, 255), st.binary(max_size=40)), max_size=20),
       st.lists(st.integers(1, 50), min_size=1, max_size=20))
@settings(max_examples=200)
def test_arbitrary_chunking(msgs, cuts):
    stream = b"".join(encode_frame(t, p) for t, p in msgs)
    dec, out, pos, k = FrameDecoder(), [], 0, 0
    while pos < len(stream):
        step = cuts[k % len(cuts)]
        out += dec.feed(stream[pos:pos + step])
        pos, k = pos + step, k + 1
    assert out == msgs


def test_image_frame_round_trip():
    img = np.random.default_rng(0).integers(0, 256, (7, 5, 3), dtype=np.uint8)
    frame = ImageFrame.from_array(9, 123, img)
    back = ImageFrame.decode(frame.encode())
    assert back == frame
    np.testing.assert_array_equal(back.to_array(), img)
    gray = ImageFrame.from_array(1, 2, img[:, :, 0])
    np.testing.assert_array_equal(ImageFrame.decode(gray.encode()).to_array(), img[:, :, 0])


def test_image_frame_size_mismatch():
    data = ImageFrame.from_array(0, 0, np.zeros((2, 2, 3), np.uint8)).encode()
    with pytest.raises(ValueError):
        ImageFrame.decode(data[:-1])


def test_detection_msg_round_trip():
    msg = DetectionMsg(4, 55, 12.5, (WireDetection(3, 0.5, 0.25, 0.5, 0.125, 1.0, "cat"),
                                     WireDetection(0, 1.0, 0, 0, 0, 0, "")))
    assert DetectionMsg.decode(msg.encode()) == msg


def test_detection_msg_validation():
    with pytest.raises(ValueError):
        DetectionMsg(0, 0, 0.0, (WireDetection(0, 1.5, 0, 0, 0, 0),)).encode()
    with pytest.raises(ValueError):
        DetectionMsg.decode(DetectionMsg(0, 0, 0.0).encode() + b"x")


# ---- routing state machine -------------------------------------------------

def data_frame(topic, body):
    return encode_frame(MsgType.DATA, codec.data_body(topic, body))


def nack_of(forwards):
    assert len(forwards) == 1
    msg_type, payload, _ = decode_frame(forwards[0].frame)
    assert msg_type == MsgType.NACK
    return codec.parse_nack(payload)


def test_core_forwards_to_subscriber():
    core = BrokerCore()
    core.handle(1, MsgType.ADVERTISE, codec.advertise_body("t", "T"))
    core.handle(2, MsgType.SUBSCRIBE, codec.subscribe_body("t"))
    out = core.handle(1, MsgType.DATA, codec.data_body("t", b"x"))
    assert [(f.target, f.frame) for f in out] == [(2, data_frame("t", b"x"))]


def test_core_publish_without_advertise():
    core = BrokerCore()
    core.handle(2, MsgType.SUBSCRIBE, codec.subscribe_body("t"))
    nack = nack_of(core.handle(1, MsgType.DATA, codec.data_body("t", b"x")))
    assert nack.reason == "not advertised" and nack.topic == "t"


def test_core_type_conflict():
    core = BrokerCore()
    assert core.handle(1, MsgType.ADVERTISE, codec.advertise_body("t", "A")) == []
    nack = nack_of(core.handle(2, MsgType.ADVERTISE, codec.advertise_body("t", "B")))
    assert "type conflict" in nack.reason
    assert not core.registry.is_advertiser(2, "t")


def test_core_malformed_and_unknown():
    core = BrokerCore()
    assert "malformed" in nack_of(core.handle(1, MsgType.SUBSCRIBE, b"\xff")).reason
    assert "unknown" in nack_of(core.handle(1, 0x42, b"")).reason


def test_core_no_echo_to_sender():
    core = BrokerCore()
    core.handle(1, MsgType.ADVERTISE, codec.advertise_body("t", "T"))
    core.handle(1, MsgType.SUBSCRIBE, codec.subscribe_body("t"))
    assert core.handle(1, MsgType.DATA, codec.data_body("t", b"x")) == []


events = st.lists(st.tuples(st.sampled_from(["adv", "sub", "pub", "drop"]),
                            st.integers(1, 4), st.sampled_from(["a", "b"]),
                            st.sampled_from(["X", "Y"])), max_size=60)


@given(events)
@settings(max_examples=300)
def test_registry_safety(seq):
    core = BrokerCore(TopicRegistry())
    live: set[int] = set()
    subs: dict[str, set[int]] = {"a": set(), "b": set()}
    for kind, session, topic, type_name in seq:
        if kind == "drop":
            core.disconnect(session)
            live.discard(session)
            for s in subs.values():
                s.discard(session)
            continue
        live.add(session)
        if kind == "adv":
            out = core.handle(session, MsgType.ADVERTISE, codec.advertise_body(topic, type_name))
        elif kind == "sub":
            subs[topic].add(session)
            out = core.handle(session, MsgType.SUBSCRIBE, codec.subscribe_body(topic))
        else:
            out = core.handle(session, MsgType.DATA, codec.data_body(topic, b"p"))
        for fwd in out:
            msg_type, _, _ = decode_frame(fwd.frame)
            if msg_type == MsgType.NACK:
                assert fwd.target == session
            else:
                # data only ever reaches live, current subscribers other than the sender
                assert fwd.target in live and fwd.target in subs[topic]
                assert fwd.target != session
        assert core.registry.sessions() <= live


# ---- live broker -----------------------------------------------------------

@pytest.fixture
def broker():
    with Broker() as b:
        yield b


def collector():
    got: list[bytes] = []
    lock = threading.Lock()

    def handler(body):
        with lock:
            got.append(body)
    return got, handler


def test_single_message_byte_identical(broker):
    body = np.random.default_rng(1).bytes(1024)
    got, handler = collector()
    with Session.connect(broker.endpoint) as pub, Session.connect(broker.endpoint) as sub:
        pub.advertise("t", "Blob")
        sub.subscribe("t", handler)
        assert wait_until(lambda: broker.registry.subscribers("t"))
        pub.publish("t", body)
        assert wait_until(lambda: got)
    assert got == [body]


def test_three_subscribers_fifo_exactly_once(broker):
    n = 2000
    sinks = [collector() for _ in range(3)]
    with Session.connect(broker.endpoint) as pub:
        subs = [Session.connect(broker.endpoint) for _ in sinks]
        try:
            pub.advertise("t", "Seq")
            for s, (_, h) in zip(subs, sinks):
                s.subscribe("t", h)
            assert wait_until(lambda: len(broker.registry.subscribers("t")) == 3)
            for i in range(n):
                pub.publish("t", struct.pack("<I", i))
                if i % 8 == 7:
                    # stay within the per-subscriber queue so nothing is dropped
                    assert wait_until(lambda: all(len(g) > i - 8 for g, _ in sinks))
            assert wait_until(lambda: all(len(g) == n for g, _ in sinks))
        finally:
            for s in subs:
                s.close()
    for got, _ in sinks:
        assert [struct.unpack("<I", b)[0] for b in got] == list(range(n))
    assert broker.dropped == 0


def test_sequential_publishes_arrive_in_order(broker):
    got, handler = collector()
    with Session.connect(broker.endpoint) as pub, Session.connect(broker.endpoint) as sub:
        pub.advertise("t", "Seq")
        sub.subscribe("t", handler)
        assert wait_until(lambda: broker.registry.subscribers("t"))
        for i in range(10_000):
            pub.publish("t", struct.pack("<I", i))
        wait_until(lambda: len(got) + broker.dropped >= 10_000, timeout=20)
    seqs = [struct.unpack("<I", b)[0] for b in got]
    assert all(a < b for a, b in zip(seqs, seqs[1:]))
    assert len(seqs) + broker.dropped == 10_000


def test_publish_unadvertised_gets_nack(broker):
    with Session.connect(broker.endpoint) as pub:
        pub.publish("nowhere", b"x")
        nack = pub.wait_nack(2.0)
    assert nack is not None and nack.reason == "not advertised"


def test_type_conflict_nack_live(broker):
    with Session.connect(broker.endpoint) as a, Session.connect(broker.endpoint) as b:
        a.advertise("t", "A")
        assert wait_until(lambda: "t" in broker.registry.topics)
        b.advertise("t", "B")
        nack = b.wait_nack(2.0)
    assert nack is not None and "type conflict" in nack.reason


def test_bad_magic_closes_only_that_session(broker):
    got, handler = collector()
    with Session.connect(broker.endpoint) as pub, Session.connect(broker.endpoint) as sub:
        pub.advertise("t", "T")
        sub.subscribe("t", handler)
        raw = socket.create_connection(("127.0.0.1", int(broker.endpoint.rsplit(":", 1)[1])))
        raw.sendall(b"garbage!")
        assert raw.recv(10) == b""      # broker hung up on the offender
        raw.close()
        assert wait_until(lambda: broker.registry.subscribers("t"))
        pub.publish("t", b"still alive")
        assert wait_until(lambda: got)
    assert got == [b"still alive"]


def test_subscriber_disconnect_unregisters(broker):
    with Session.connect(broker.endpoint) as pub:
        sub = Session.connect(broker.endpoint)
        sub.subscribe("t", lambda b: None)
        assert wait_until(lambda: broker.registry.subscribers("t"))
        sub.close()
        assert wait_until(lambda: not broker.registry.subscribers("t"))
        pub.advertise("t", "T")
        pub.publish("t", b"x")          # no subscribers: silently nothing
        assert pub.wait_nack(0.2) is None


def test_unreachable_broker():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(BrokerUnreachable):
        Session.connect(f"127.0.0.1:{port}", retries=1, backoff=0.01)
