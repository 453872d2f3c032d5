"""TCP proxy that injects propagation delay.

Models a link with fixed one-way latency and unlimited bandwidth: every
chunk is delivered one-way-delay after it arrived, and chunks never
overtake each other. Each direction uses a reader thread (stamps arrival
times) and a writer thread (sleeps until each chunk is due), so closely
spaced writes share the pipe instead of queueing behind one another's
sleeps.

Loopback TCP connects in microseconds, which would let an HTTP client
open a fresh connection for free. With ``emulate_handshake=True`` the
first client-to-server chunk of every connection is held back an extra
round trip, which is what the real SYN/SYN-ACK exchange would have cost
before any payload byte moved.
"""

from __future__ import annotations

import logging
import queue
import random
import socket
import threading
import time
from dataclasses import dataclass

log = logging.getLogger(__name__)

_CHUNK = 65536
_EOF = object()


@dataclass(frozen=True)
class _TimedChunk:
    deliver_at: float
    data: bytes


class DelayProxy:
    def __init__(
        self,
        target_host: str,
        target_port: int,
        *,
        listen_host: str = "127.0.0.1",
        listen_port: int = 0,
        one_way_delay_ms: float = 0.0,
        jitter_ms: float = 0.0,
        emulate_handshake: bool = False,
        seed: int | None = None,
    ):
        if one_way_delay_ms < 0 or jitter_ms < 0:
            raise ValueError("delays must be >= 0")
        self.target_host = target_host
        self.target_port = target_port
        self.host = listen_host
        self.port = listen_port
        self.one_way_delay_ms = one_way_delay_ms
        self.jitter_ms = jitter_ms
        self.emulate_handshake = emulate_handshake
        self._rng = random.Random(seed)
        self._rng_lock = threading.Lock()
        self._listener: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._running = False
        self._conns_lock = threading.Lock()
        self._conns: list[socket.socket] = []

    @property
    def endpoint(self) -> tuple[str, int]:
        return self.host, self.port

    def start(self) -> "DelayProxy":
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, self.port))
        listener.listen(64)
        # closing a socket does not wake a blocked accept(); poll instead
        listener.settimeout(0.25)
        self.port = listener.getsockname()[1]
        self._listener = listener
        self._running = True
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"delay-proxy-{self.port}", daemon=True
        )
        self._accept_thread.start()
        return self

    def stop(self) -> None:
        self._running = False
        if self._listener is not None:
            try:
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._listener.close()
            except OSError:
                pass
        with self._conns_lock:
            conns, self._conns = self._conns, []
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2.0)

    def __enter__(self) -> "DelayProxy":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _delay_s(self) -> float:
        jitter = 0.0
        if self.jitter_ms:
            with self._rng_lock:
                jitter = self._rng.uniform(0, self.jitter_ms)
        return (self.one_way_delay_ms + jitter) / 1000.0

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while self._running:
            try:
                client, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            if not self._running:
                client.close()
                return
            client.settimeout(None)
            try:
                upstream = socket.create_connection((self.target_host, self.target_port), timeout=5.0)
            except OSError:
                log.warning("proxy %d: target %s:%d unreachable", self.port, self.target_host, self.target_port)
                client.close()
                continue
            for sock in (client, upstream):
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._conns_lock:
                self._conns.extend((client, upstream))
            extra_s = 2 * self.one_way_delay_ms / 1000.0 if self.emulate_handshake else 0.0
            self._pump(client, upstream, first_chunk_extra_s=extra_s)
            self._pump(upstream, client, first_chunk_extra_s=0.0)

    def _pump(self, src: socket.socket, dst: socket.socket, first_chunk_extra_s: float) -> None:
        chunks: queue.Queue = queue.Queue()

        def reader() -> None:
            extra = first_chunk_extra_s
            last_due = 0.0
            while True:
                try:
                    data = src.recv(_CHUNK)
                except OSError:
                    data = b""
                if not data:
                    chunks.put(_EOF)
                    return
                due = time.monotonic() + self._delay_s() + extra
                extra = 0.0
                # FIFO: a chunk is never due before its predecessor
                last_due = max(last_due, due)
                chunks.put(_TimedChunk(last_due, data))

        def writer() -> None:
            while True:
                item = chunks.get()
                if item is _EOF:
                    break
                wait = item.deliver_at - time.monotonic()
                if wait > 0:
                    time.sleep(wait)
                try:
                    dst.sendall(item.data)
                except OSError:
                    break
            # half-close so the peer sees EOF once the delayed bytes are out
            try:
                dst.shutdown(socket.SHUT_WR)
            except OSError:
                pass

        threading.Thread(target=reader, daemon=True).start()
        threading.Thread(target=writer, daemon=True).start()
