"""Latency measurement drivers for both transports.

The MQTT sample clock runs from the start of the PUBLISH write to the
matching PUBACK (QoS 1); at QoS 0 there is nothing to wait for, so the
sample only covers the socket write and the report labels the QoS. The
HTTP sample clock runs from request start to the fully read response;
per-request mode opens a fresh TCP connection inside the timed window,
keep-alive mode reuses one connection and times only the exchange.

Failed publishes (ack or response timeout) are excluded from the means
and surfaced in the report's failure counts instead.
"""

from __future__ import annotations

import http.client
import http.server
import json
import logging
import socket
import threading
import time
import uuid
from dataclasses import dataclass
from typing import Callable
from urllib.parse import urlsplit

from atms.bench.proxy import DelayProxy
from atms.bench.report import BenchReport, LatencySample, Transport, summarize
from atms.mqtt.broker import EmbeddedBroker
from atms.mqtt.client import AckTimeoutError, MqttClient

log = logging.getLogger(__name__)

DEFAULT_TOPIC = "pts/lk/train/intercity/coastal/t1015/telemetry/gps"
DEFAULT_WARMUP = 5

PayloadTemplate = Callable[[int], bytes]


def default_payload(seq: int) -> bytes:
    doc = {
        "vehicle": "t1015",
        "ts_ms": int(time.time() * 1000),
        "lat_deg": 6.933780,
        "lon_deg": 79.850160,
        "seq": seq,
    }
    return json.dumps(doc, separators=(",", ":")).encode("ascii")


@dataclass(frozen=True)
class MeasureResult:
    transport: Transport
    samples: tuple[LatencySample, ...]
    failures: int


def _resolve_payload(payload: bytes | PayloadTemplate | None) -> PayloadTemplate:
    if payload is None:
        return default_payload
    if isinstance(payload, (bytes, bytearray)):
        fixed = bytes(payload)
        return lambda _seq: fixed
    return payload


def measure_mqtt(
    n: int,
    host: str,
    port: int,
    *,
    qos: int = 1,
    topic: str = DEFAULT_TOPIC,
    payload: bytes | PayloadTemplate | None = None,
    warmup: int = DEFAULT_WARMUP,
    ack_timeout_s: float = 10.0,
) -> MeasureResult:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n!r}")
    if qos not in (0, 1):
        raise ValueError(f"qos must be 0 or 1, got {qos!r}")
    make = _resolve_payload(payload)
    # no retransmits: a retried publish would fold the retry wait into
    # the sample, so a lost ack is reported as a failure instead
    client = MqttClient(
        client_id=f"bench-{uuid.uuid4().hex[:8]}",
        ack_timeout_s=ack_timeout_s,
        max_retransmits=0,
    )
    client.connect(host, port)
    samples: list[LatencySample] = []
    failures = 0
    try:
        for i in range(warmup):
            try:
                client.publish(topic, make(-(i + 1)), qos)
            except AckTimeoutError:
                pass
        for seq in range(n):
            body = make(seq)
            t0 = time.perf_counter()
            try:
                client.publish(topic, body, qos)
            except AckTimeoutError:
                failures += 1
                continue
            samples.append(
                LatencySample(Transport.MQTT, seq, (time.perf_counter() - t0) * 1000.0)
            )
    finally:
        try:
            client.disconnect()
        except Exception:
            client.close()
    return MeasureResult(Transport.MQTT, tuple(samples), failures)


def measure_http(
    n: int,
    url: str,
    *,
    mode: str = "per-request",
    payload: bytes | PayloadTemplate | None = None,
    warmup: int = DEFAULT_WARMUP,
    timeout_s: float = 10.0,
) -> MeasureResult:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n!r}")
    if mode not in ("per-request", "keep-alive"):
        raise ValueError(f"mode must be per-request or keep-alive, got {mode!r}")
    parts = urlsplit(url)
    if parts.scheme != "http" or not parts.hostname:
        raise ValueError(f"need an http:// URL, got {url!r}")
    host = parts.hostname
    port = parts.port or 80
    path = parts.path or "/"
    make = _resolve_payload(payload)
    headers = {"Content-Type": "application/json"}
    errors = (OSError, http.client.HTTPException)

    def exchange(conn: http.client.HTTPConnection, seq: int) -> None:
        conn.request("POST", path, body=make(seq), headers=headers)
        resp = conn.getresponse()
        resp.read()
        if resp.status >= 400:
            raise OSError(f"http status {resp.status}")

    samples: list[LatencySample] = []
    failures = 0
    if mode == "per-request":
        # connection refused on the probe is an error; later failures count
        probe = socket.create_connection((host, port), timeout=timeout_s)
        probe.close()
        for i in range(warmup):
            conn = http.client.HTTPConnection(host, port, timeout=timeout_s)
            try:
                exchange(conn, -(i + 1))
            except errors:
                pass
            finally:
                conn.close()
        for seq in range(n):
            conn = http.client.HTTPConnection(host, port, timeout=timeout_s)
            t0 = time.perf_counter()
            try:
                exchange(conn, seq)
            except errors:
                failures += 1
                continue
            finally:
                conn.close()
            samples.append(
                LatencySample(Transport.HTTP, seq, (time.perf_counter() - t0) * 1000.0)
            )
    else:
        conn = http.client.HTTPConnection(host, port, timeout=timeout_s)
        try:
            exchange(conn, -1)  # raises if unreachable; also primes the connection
            for i in range(warmup):
                try:
                    exchange(conn, -(i + 2))
                except errors:
                    pass
            for seq in range(n):
                t0 = time.perf_counter()
                try:
                    exchange(conn, seq)
                except errors:
                    failures += 1
                    # reopen outside the timed window so one bad exchange
                    # does not bill the next sample for a reconnect
                    conn.close()
                    conn = http.client.HTTPConnection(host, port, timeout=timeout_s)
                    continue
                samples.append(
                    LatencySample(Transport.HTTP, seq, (time.perf_counter() - t0) * 1000.0)
                )
        finally:
            conn.close()
    return MeasureResult(Transport.HTTP, tuple(samples), failures)


class _IngestHandler(http.server.BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"  # keep-alive mode needs persistent connections

    def do_POST(self) -> None:
        length = int(self.headers.get("Content-Length", 0))
        if length:
            self.rfile.read(length)
        self.send_response(200)
        self.send_header("Content-Length", "0")
        self.end_headers()
        self.server.received += 1  # type: ignore[attr-defined]

    def log_message(self, fmt: str, *args) -> None:
        pass


class IngestSink(http.server.ThreadingHTTPServer):
    """Minimal fix-ingest endpoint: accepts POSTs, answers 200, counts them."""

    daemon_threads = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _IngestHandler)
        self.received = 0

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> "IngestSink":
        threading.Thread(target=self.serve_forever, name="ingest-sink", daemon=True).start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()

    @property
    def url(self) -> str:
        return f"http://{self.server_address[0]}:{self.port}/ingest/fix"


def run_comparison(
    n: int = 100,
    *,
    one_way_delay_ms: float = 50.0,
    jitter_ms: float = 0.0,
    qos: int = 1,
    http_mode: str = "per-request",
    warmup: int = DEFAULT_WARMUP,
) -> BenchReport:
    """Self-contained A/B run: local broker and sink behind delay proxies.

    Both transports cross an identical simulated link, including the
    connection-setup round trip, so the only difference left is how
    often each one pays it.
    """
    broker = EmbeddedBroker().start()
    sink = IngestSink().start()
    proxy_m = DelayProxy(
        "127.0.0.1", broker.port,
        one_way_delay_ms=one_way_delay_ms, jitter_ms=jitter_ms, emulate_handshake=True,
    ).start()
    proxy_h = DelayProxy(
        "127.0.0.1", sink.port,
        one_way_delay_ms=one_way_delay_ms, jitter_ms=jitter_ms, emulate_handshake=True,
    ).start()
    try:
        mqtt_res = measure_mqtt(n, "127.0.0.1", proxy_m.port, qos=qos, warmup=warmup)
        http_res = measure_http(
            n, f"http://127.0.0.1:{proxy_h.port}/ingest/fix", mode=http_mode, warmup=warmup
        )
    finally:
        proxy_m.stop()
        proxy_h.stop()
        sink.stop()
        broker.stop()
    return summarize(
        mqtt_res.samples + http_res.samples,
        failures={"mqtt": mqtt_res.failures, "http": http_res.failures},
        mqtt_qos=qos,
        http_mode=http_mode,
        meta={"one_way_delay_ms": one_way_delay_ms, "jitter_ms": jitter_ms, "n_requested": n},
    )
