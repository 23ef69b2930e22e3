"""Topic registry and the forwarding broker every node connects to.

``BrokerCore`` is the transport-free state machine: it consumes session
events and returns forwarding actions, which keeps the routing rules testable
without sockets. ``Broker`` hosts it behind an asyncio TCP server.
"""

from __future__ import annotations

import asyncio
import collections
import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Optional

from . import codec
from .codec import MsgType, ProtocolError

log = logging.getLogger(__name__)

DEFAULT_QUEUE_DEPTH = 8


@dataclass
class TopicInfo:
    type_name: str = ""
    advertisers: set[int] = field(default_factory=set)
    subscribers: set[int] = field(default_factory=set)


class TopicRegistry:
    """Map of topic name to advertisers, subscribers and message type."""

    def __init__(self):
        self.topics: dict[str, TopicInfo] = {}

    def advertise(self, session: int, topic: str, type_name: str) -> Optional[str]:
        """Register an advertiser; returns a rejection reason or None."""
        info = self.topics.setdefault(topic, TopicInfo())
        if info.type_name and info.advertisers and info.type_name != type_name:
            return f"type conflict: topic {topic!r} carries {info.type_name}, not {type_name}"
        info.type_name = type_name
        info.advertisers.add(session)
        return None

    def subscribe(self, session: int, topic: str) -> None:
        self.topics.setdefault(topic, TopicInfo()).subscribers.add(session)

    def is_advertiser(self, session: int, topic: str) -> bool:
        info = self.topics.get(topic)
        return info is not None and session in info.advertisers

    def subscribers(self, topic: str) -> set[int]:
        info = self.topics.get(topic)
        return set(info.subscribers) if info else set()

    def disconnect(self, session: int) -> None:
        for name in list(self.topics):
            info = self.topics[name]
            info.advertisers.discard(session)
            info.subscribers.discard(session)
            if not info.advertisers and not info.subscribers:
                del self.topics[name]

    def sessions(self) -> set[int]:
        out: set[int] = set()
        for info in self.topics.values():
            out |= info.advertisers | info.subscribers
        return out


@dataclass(frozen=True)
class Forward:
    """Send ``frame`` (an encoded wire frame) to session ``target``."""

    target: int
    frame: bytes


class BrokerCore:
    def __init__(self, registry: Optional[TopicRegistry] = None):
        self.registry = registry if registry is not None else TopicRegistry()
        self._lock = threading.Lock()

    def _nack(self, session: int, msg_type: int, topic: str, reason: str) -> list[Forward]:
        log.info("NACK session %d: %s", session, reason)
        return [Forward(session, codec.encode_frame(
            MsgType.NACK, codec.nack_body(msg_type, topic, reason)))]

    def handle(self, session: int, msg_type: int, payload: bytes) -> list[Forward]:
        """Apply one control or data message and return the resulting sends."""
        with self._lock:
            try:
                if msg_type == MsgType.ADVERTISE:
                    topic, type_name = codec.parse_advertise(payload)
                    reason = self.registry.advertise(session, topic, type_name)
                    return self._nack(session, msg_type, topic, reason) if reason else []
                if msg_type == MsgType.SUBSCRIBE:
                    self.registry.subscribe(session, codec.parse_subscribe(payload))
                    return []
                if msg_type == MsgType.DATA:
                    topic, _ = codec.parse_data(payload)
                    if not self.registry.is_advertiser(session, topic):
                        return self._nack(session, msg_type, topic, "not advertised")
                    frame = codec.encode_frame(MsgType.DATA, payload)
                    targets = sorted(self.registry.subscribers(topic) - {session})
                    return [Forward(t, frame) for t in targets]
            except (ValueError, UnicodeDecodeError) as exc:
                return self._nack(session, msg_type, "", f"malformed message: {exc}")
            return self._nack(session, msg_type, "", f"unknown message type 0x{msg_type:02x}")

    def disconnect(self, session: int) -> None:
        with self._lock:
            self.registry.disconnect(session)


class _Outbox:
    """Bounded per-subscriber send queue; overflow drops the oldest frame."""

    def __init__(self, writer: asyncio.StreamWriter, depth: int):
        self.writer = writer
        self.queue: collections.deque[bytes] = collections.deque(maxlen=depth)
        self.ready = asyncio.Event()
        self.dropped = 0
        self.closed = False

    def put(self, frame: bytes) -> None:
        if len(self.queue) == self.queue.maxlen:
            self.dropped += 1
        self.queue.append(frame)
        self.ready.set()

    async def run(self) -> None:
        try:
            while not self.closed:
                await self.ready.wait()
                self.ready.clear()
                while self.queue:
                    self.writer.write(self.queue.popleft())
                    await self.writer.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass


class Broker:
    """Asyncio TCP broker. Use ``start_in_thread`` for in-process use."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 queue_depth: int = DEFAULT_QUEUE_DEPTH,
                 max_frame: int = codec.DEFAULT_MAX_FRAME):
        self.host = host
        self.port = port
        self.queue_depth = queue_depth
        self.max_frame = max_frame
        self.core = BrokerCore()
        self._ids = itertools.count(1)
        self._outboxes: dict[int, _Outbox] = {}
        self._server: Optional[asyncio.base_events.Server] = None
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._thread: Optional[threading.Thread] = None
        self._stopped: Optional[asyncio.Event] = None

    @property
    def registry(self) -> TopicRegistry:
        return self.core.registry

    @property
    def dropped(self) -> int:
        return sum(o.dropped for o in self._outboxes.values())

    async def _handle_conn(self, reader: asyncio.StreamReader,
                           writer: asyncio.StreamWriter) -> None:
        session = next(self._ids)
        outbox = _Outbox(writer, self.queue_depth)
        self._outboxes[session] = outbox
        sender = asyncio.ensure_future(outbox.run())
        decoder = codec.FrameDecoder(self.max_frame)
        log.debug("session %d connected from %s", session, writer.get_extra_info("peername"))
        try:
            while True:
                chunk = await reader.read(65536)
                if not chunk:
                    break
                for msg_type, payload in decoder.feed(chunk):
                    for action in self.core.handle(session, msg_type, payload):
                        box = self._outboxes.get(action.target)
                        if box is not None:
                            box.put(action.frame)
                    # let subscriber writers drain between frames of one burst
                    await asyncio.sleep(0)
        except ProtocolError as exc:
            log.warning("session %d protocol error: %s", session, exc)
        except ConnectionError:
            pass
        finally:
            self.core.disconnect(session)
            self._outboxes.pop(session, None)
            outbox.closed = True
            outbox.ready.set()
            sender.cancel()
            writer.close()
            log.debug("session %d disconnected", session)

    async def serve(self) -> None:
        self._stopped = asyncio.Event()
        self._server = await asyncio.start_server(self._handle_conn, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("broker listening on %s:%d", self.host, self.port)
        async with self._server:
            await self._stopped.wait()

    def start_in_thread(self) -> "Broker":
        started = threading.Event()
        errors: list[BaseException] = []

        def run():
            self._loop = asyncio.new_event_loop()
            try:
                self._loop.run_until_complete(self._start())
            except BaseException as exc:  # surfaced to the caller below
                errors.append(exc)
                started.set()
                return
            started.set()
            self._loop.run_until_complete(self._wait_stopped())
            self._loop.close()

        self._thread = threading.Thread(target=run, name="broker", daemon=True)
        self._thread.start()
        started.wait()
        if errors:
            raise errors[0]
        return self

    async def _start(self) -> None:
        self._stopped = asyncio.Event()
        self._server = await asyncio.start_server(self._handle_conn, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]

    async def _wait_stopped(self) -> None:
        await self._stopped.wait()
        self._server.close()
        for box in list(self._outboxes.values()):
            box.writer.close()
        await self._server.wait_closed()

    def stop(self) -> None:
        if self._loop is not None and self._stopped is not None:
            self._loop.call_soon_threadsafe(self._stopped.set)
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "Broker":
        return self.start_in_thread()

    def __exit__(self, *exc) -> None:
        self.stop()

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"
