"""Blocking client session with a background receive thread."""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from typing import Callable, Optional

from . import codec
from .codec import MsgType, Nack, ProtocolError

log = logging.getLogger(__name__)

Handler = Callable[[bytes], None]


class BrokerUnreachable(ConnectionError):
    pass


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must look like HOST:PORT, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


class Session:
    """One connection to the broker.

    Subscribed bodies are handed to per-topic handlers on the receive thread;
    handlers must be quick. NACKs are queued on ``nacks``.
    """

    def __init__(self, sock: socket.socket, name: str = "session"):
        self.name = name
        self._sock = sock
        self._send_lock = threading.Lock()
        self._handlers: dict[str, Handler] = {}
        self.nacks: "queue.Queue[Nack]" = queue.Queue()
        self.closed = threading.Event()
        self._rx = threading.Thread(target=self._recv_loop, name=f"{name}-rx", daemon=True)
        self._rx.start()

    @classmethod
    def connect(cls, endpoint: str, name: str = "session", retries: int = 5,
                backoff: float = 0.1) -> "Session":
        """Connect with exponential backoff; raises :class:`BrokerUnreachable`."""
        host, port = parse_endpoint(endpoint)
        delay = backoff
        last: Optional[OSError] = None
        for attempt in range(retries + 1):
            try:
                sock = socket.create_connection((host, port), timeout=5)
                sock.settimeout(None)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                return cls(sock, name)
            except OSError as exc:
                last = exc
                if attempt < retries:
                    log.warning("%s: broker %s unreachable (%s), retrying in %.2fs",
                                name, endpoint, exc, delay)
                    time.sleep(delay)
                    delay *= 2
        raise BrokerUnreachable(f"cannot reach broker at {endpoint}: {last}")

    def _send(self, msg_type: int, payload: bytes) -> None:
        frame = codec.encode_frame(msg_type, payload)
        with self._send_lock:
            self._sock.sendall(frame)

    def advertise(self, topic: str, type_name: str) -> None:
        self._send(MsgType.ADVERTISE, codec.advertise_body(topic, type_name))

    def subscribe(self, topic: str, handler: Handler) -> None:
        self._handlers[topic] = handler
        self._send(MsgType.SUBSCRIBE, codec.subscribe_body(topic))

    def publish(self, topic: str, body: bytes) -> None:
        """Fire-and-forget; a NACK arrives asynchronously if the topic was never advertised."""
        self._send(MsgType.DATA, codec.data_body(topic, body))

    def wait_nack(self, timeout: float = 2.0) -> Optional[Nack]:
        try:
            return self.nacks.get(timeout=timeout)
        except queue.Empty:
            return None

    def _recv_loop(self) -> None:
        decoder = codec.FrameDecoder()
        try:
            while True:
                chunk = self._sock.recv(65536)
                if not chunk:
                    break
                for msg_type, payload in decoder.feed(chunk):
                    self._dispatch(msg_type, payload)
        except ProtocolError as exc:
            log.error("%s: protocol error from broker: %s", self.name, exc)
        except OSError:
            pass
        finally:
            self.closed.set()

    def _dispatch(self, msg_type: int, payload: bytes) -> None:
        if msg_type == MsgType.DATA:
            topic, body = codec.parse_data(payload)
            handler = self._handlers.get(topic)
            if handler is not None:
                try:
                    handler(body)
                except Exception:
                    log.exception("%s: handler for %r failed", self.name, topic)
        elif msg_type == MsgType.NACK:
            nack = codec.parse_nack(payload)
            log.warning("%s: NACK on %r: %s", self.name, nack.topic, nack.reason)
            self.nacks.put(nack)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._rx.join(timeout=2)

    def __enter__(self) -> "Session":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
