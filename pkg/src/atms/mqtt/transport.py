"""Byte transports for MQTT sessions.

The client and broker speak to a duck-typed transport: ``send(bytes)``,
``recv(max_bytes) -> bytes`` (empty result means EOF), ``close()``. TCP is
the production transport; the in-memory pipe exists so reliability behavior
(packet loss, broker restarts) can be tested deterministically without real
sockets.
"""

from __future__ import annotations

import queue
import random
import socket
import threading


class TcpTransport:
    """Blocking socket wrapper."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._closed = False

    @classmethod
    def connect(cls, host: str, port: int, timeout_s: float = 5.0) -> "TcpTransport":
        sock = socket.create_connection((host, port), timeout=timeout_s)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock)

    def send(self, data: bytes) -> None:
        self._sock.sendall(data)

    def recv(self, max_bytes: int = 4096) -> bytes:
        try:
            return self._sock.recv(max_bytes)
        except OSError:
            return b""

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


_EOF = object()


class MemoryEndpoint:
    """One end of an in-memory duplex pipe.

    ``send`` enqueues one chunk for the peer; ``recv`` blocks for the next
    chunk. Chunk boundaries follow send() calls, which in practice means one
    chunk per encoded MQTT packet, so dropping a chunk drops a whole packet.
    """

    def __init__(self) -> None:
        self._inbox: queue.Queue = queue.Queue()
        self._peer: "MemoryEndpoint | None" = None
        self._closed = threading.Event()

    def send(self, data: bytes) -> None:
        if self._closed.is_set():
            raise BrokenPipeError("endpoint closed")
        peer = self._peer
        if peer is None or peer._closed.is_set():
            raise BrokenPipeError("peer closed")
        peer._inbox.put(bytes(data))

    def recv(self, max_bytes: int = 4096) -> bytes:
        # max_bytes is advisory here; a whole chunk is always returned.
        while True:
            if self._closed.is_set() and self._inbox.empty():
                return b""
            try:
                item = self._inbox.get(timeout=0.05)
            except queue.Empty:
                continue
            if item is _EOF:
                return b""
            return item

    def close(self) -> None:
        if self._closed.is_set():
            return
        self._closed.set()
        self._inbox.put(_EOF)
        peer = self._peer
        if peer is not None and not peer._closed.is_set():
            peer._inbox.put(_EOF)


def memory_pipe() -> tuple[MemoryEndpoint, MemoryEndpoint]:
    a, b = MemoryEndpoint(), MemoryEndpoint()
    a._peer, b._peer = b, a
    return a, b


class LossyTransport:
    """Drops whole outbound chunks with a configured probability.

    Loss starts disabled so connection setup (CONNECT/SUBSCRIBE handshakes)
    can complete; tests flip ``enabled`` once the data phase begins. With
    one encoded packet per send() call, a dropped chunk is a dropped packet
    and the surviving byte stream stays well-formed.
    """

    def __init__(self, inner, drop_rate: float, rng: random.Random | None = None, enabled: bool = False):
        if not 0.0 <= drop_rate <= 1.0:
            raise ValueError(f"drop_rate must be in [0, 1], got {drop_rate}")
        self.inner = inner
        self.drop_rate = drop_rate
        self.rng = rng or random.Random()
        self.enabled = enabled
        self.dropped = 0

    def send(self, data: bytes) -> None:
        if self.enabled and self.rng.random() < self.drop_rate:
            self.dropped += 1
            return
        self.inner.send(data)

    def recv(self, max_bytes: int = 4096) -> bytes:
        return self.inner.recv(max_bytes)

    def close(self) -> None:
        self.inner.close()
