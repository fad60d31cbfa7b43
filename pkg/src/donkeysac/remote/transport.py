"""Byte-message channels: a deterministic simulated network and a TCP socket link.

Both expose ``send(data)`` and deliver incoming messages to ``on_receive``.
"""

from __future__ import annotations

import heapq
import logging
import socket
import struct
import threading
import time
from typing import Callable

from ..numcore import SeededRng
from .protocol import Frame, ProtocolError, decode_frame, encode_frame

log = logging.getLogger(__name__)

Receiver = Callable[[bytes, int], None]  # (message, receive time in microseconds)


class EventLoop:
    """Single-threaded discrete-event scheduler over integer microseconds."""

    def __init__(self):
        self.now = 0
        self._queue: list[tuple[int, int, Callable[[], None]]] = []
        self._counter = 0

    def schedule(self, at: int, fn: Callable[[], None]) -> None:
        if at < self.now:
            raise ValueError("cannot schedule an event in the past")
        heapq.heappush(self._queue, (int(at), self._counter, fn))
        self._counter += 1

    def run_until(self, t: int) -> None:
        """Run every event with time <= t (ties in scheduling order), then set now = t."""
        while self._queue and self._queue[0][0] <= t:
            at, _, fn = heapq.heappop(self._queue)
            self.now = at
            fn()
        self.now = max(self.now, int(t))

    def run_while(self, cond: Callable[[], bool], deadline: int) -> bool:
        """Run events until ``cond()`` is false or ``deadline`` passes; returns ``not cond()``."""
        while cond():
            if not self._queue or self._queue[0][0] > deadline:
                self.now = max(self.now, deadline)
                return False
            at, _, fn = heapq.heappop(self._queue)
            self.now = at
            fn()
        return True

    def pending(self) -> int:
        return len(self._queue)


class SimulatedLink:
    """One-way channel with latency plus uniform jitter in ``[0, jitter_us]``."""

    def __init__(self, loop: EventLoop, latency_us: int, jitter_us: int = 0, rng: SeededRng | None = None):
        if latency_us < 0 or jitter_us < 0:
            raise ValueError("latency and jitter must be non-negative")
        if jitter_us and rng is None:
            raise ValueError("a jittered link needs an rng")
        self.loop = loop
        self.latency_us = int(latency_us)
        self.jitter_us = int(jitter_us)
        self.rng = rng
        self.on_receive: Receiver | None = None
        self.sent = 0

    def delay(self) -> int:
        extra = int(self.rng.integers(0, self.jitter_us + 1)) if self.jitter_us else 0
        return self.latency_us + extra

    @property
    def max_delay_us(self) -> int:
        return self.latency_us + self.jitter_us

    def send(self, data: bytes) -> None:
        self.sent += 1
        data = bytes(data)
        at = self.loop.now + self.delay()

        def deliver():
            if self.on_receive is not None:
                self.on_receive(data, self.loop.now)

        self.loop.schedule(at, deliver)


class Publisher:
    """Stamps frames with per-topic sequence numbers and the sender clock."""

    def __init__(self, channel, clock: Callable[[], int]):
        self.channel = channel
        self.clock = clock
        self._seq: dict[str, int] = {}

    def publish(self, topic: str, payload: bytes) -> Frame:
        seq = self._seq.get(topic, 0) + 1
        self._seq[topic] = seq
        frame = Frame(topic, seq, int(self.clock()), payload)
        self.channel.send(encode_frame(frame))
        return frame

    def last_sequence(self, topic: str) -> int:
        return self._seq.get(topic, 0)


class Dispatcher:
    """Decodes incoming messages and routes frames by topic; malformed input is counted, not raised."""

    def __init__(self):
        self.handlers: dict[str, Callable[[Frame, int], None]] = {}
        self.errors = 0

    def on(self, topic: str, handler: Callable[[Frame, int], None]) -> None:
        self.handlers[topic] = handler

    def __call__(self, data: bytes, received_at: int) -> None:
        try:
            frame = decode_frame(data)
        except ProtocolError as exc:
            self.errors += 1
            log.warning("dropping malformed message: %s", exc)
            return
        handler = self.handlers.get(frame.topic)
        if handler is not None:
            handler(frame, received_at)


# ------------------------------------------------------------------ TCP

_LEN = struct.Struct("<I")


class TransportClosed(ConnectionError):
    pass


def monotonic_us() -> int:
    return time.monotonic_ns() // 1000


class TcpChannel:
    """Length-prefixed messages over a connected socket; a reader thread feeds ``on_receive``."""

    def __init__(self, sock: socket.socket, clock: Callable[[], int] = monotonic_us):
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.clock = clock
        self.on_receive: Receiver | None = None
        self._send_lock = threading.Lock()
        self._reader: threading.Thread | None = None
        self.closed = threading.Event()
        self.error: BaseException | None = None

    def send(self, data: bytes) -> None:
        if self.closed.is_set():
            raise TransportClosed("channel is closed")
        try:
            with self._send_lock:
                self.sock.sendall(_LEN.pack(len(data)) + data)
        except OSError as exc:
            self.closed.set()
            raise TransportClosed(str(exc)) from exc

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            chunk = self.sock.recv(n)
            if not chunk:
                raise TransportClosed("peer closed the connection")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def _read_loop(self) -> None:
        try:
            while not self.closed.is_set():
                (n,) = _LEN.unpack(self._recv_exact(_LEN.size))
                data = self._recv_exact(n)
                if self.on_receive is not None:
                    self.on_receive(data, self.clock())
        except (OSError, TransportClosed) as exc:
            self.error = exc
        finally:
            self.closed.set()

    def start(self) -> "TcpChannel":
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        return self

    def close(self) -> None:
        self.closed.set()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def connect(host: str, port: int, attempts: int = 5, delay_s: float = 0.5) -> TcpChannel:
    """Connect with a bounded number of retries."""
    last: Exception | None = None
    for i in range(attempts):
        try:
            sock = socket.create_connection((host, port), timeout=5.0)
            sock.settimeout(None)
            return TcpChannel(sock)
        except OSError as exc:
            last = exc
            log.info("connect attempt %d/%d to %s:%d failed: %s", i + 1, attempts, host, port, exc)
            time.sleep(delay_s)
    raise TransportClosed(f"could not connect to {host}:{port} after {attempts} attempts") from last


class TcpServer:
    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, port))
        self.sock.listen(1)

    @property
    def port(self) -> int:
        return self.sock.getsockname()[1]

    def accept(self, timeout: float | None = None) -> TcpChannel:
        self.sock.settimeout(timeout)
        conn, _ = self.sock.accept()
        conn.settimeout(None)
        return TcpChannel(conn)

    def close(self) -> None:
        self.sock.close()
