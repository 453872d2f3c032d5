"""MQTT client session.

Blocking, thread-safe API over a background reader thread. QoS-0 publishes
return after the socket write; QoS-1 publishes block until the matching
PUBACK arrives, retransmitting with the dup flag on ack timeout until the
retry budget is exhausted. Inbound QoS-1 messages are acknowledged
automatically before handler dispatch.

Handlers run on a dedicated dispatcher thread, in arrival order. Keeping
them off the reader thread lets a handler publish at QoS 1 on the same
client: the reader stays free to process the PUBACK.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
import uuid

from atms import topics
from atms.mqtt.packets import (
    Connack,
    Connect,
    Disconnect,
    MqttDecodeError,
    Pingreq,
    Pingresp,
    Puback,
    Publish,
    Suback,
    Subscribe,
    decode,
    encode,
)
from atms.mqtt.transport import TcpTransport

log = logging.getLogger(__name__)


class NotConnectedError(ConnectionError):
    """Operation requires a live session."""


class AckTimeoutError(TimeoutError):
    """No PUBACK/SUBACK arrived within the retry budget."""


class SubscriptionRefusedError(RuntimeError):
    """Broker returned 0x80 for a subscription filter."""


class MqttClient:
    def __init__(
        self,
        client_id: str | None = None,
        *,
        ack_timeout_s: float = 2.0,
        max_retransmits: int = 3,
        keep_alive_s: int = 0,
        on_message=None,
    ):
        self.client_id = client_id or f"c-{uuid.uuid4().hex[:12]}"
        self.ack_timeout_s = ack_timeout_s
        self.max_retransmits = max_retransmits
        self.keep_alive_s = keep_alive_s
        self.on_message = on_message  # callable(topic: str, payload: bytes)
        self.packet_tap = None  # callable(Publish), sees every inbound publish
        self._transport = None
        self._send_lock = threading.Lock()
        self._state_lock = threading.Lock()
        self._connected = threading.Event()
        self._connack: Connack | None = None
        self._next_pid = 1
        self._pending_acks: dict[int, threading.Event] = {}
        self._pending_subacks: dict[int, tuple[threading.Event, list]] = {}
        self._handlers: list[tuple[topics.TopicFilter, object]] = []
        self._reader: threading.Thread | None = None
        self._dispatcher: threading.Thread | None = None
        self._inbound: queue.Queue = queue.Queue()
        self._pinger: threading.Thread | None = None
        self._closing = False

    @property
    def connected(self) -> bool:
        return self._connected.is_set()

    def connect(self, host: str | None = None, port: int | None = None, *, transport=None, timeout_s: float = 5.0):
        """Open the session over TCP (host/port) or a prebuilt transport."""
        if transport is None:
            if host is None or port is None:
                raise ValueError("connect needs host/port or an explicit transport")
            transport = TcpTransport.connect(host, port, timeout_s=timeout_s)
        self._transport = transport
        self._closing = False
        self._inbound = queue.Queue()
        self._dispatcher = threading.Thread(
            target=self._dispatch_loop, name=f"mqtt-dispatch-{self.client_id}", daemon=True
        )
        self._dispatcher.start()
        self._reader = threading.Thread(target=self._reader_loop, name=f"mqtt-{self.client_id}", daemon=True)
        self._reader.start()
        self._send(Connect(client_id=self.client_id, keep_alive_s=self.keep_alive_s, clean_session=True))
        if not self._connected.wait(timeout_s):
            self.close()
            raise ConnectionError("timed out waiting for CONNACK")
        assert self._connack is not None
        if self._connack.return_code != 0:
            self.close()
            raise ConnectionError(f"broker refused connection: return code {self._connack.return_code}")
        if self.keep_alive_s > 0:
            self._pinger = threading.Thread(target=self._ping_loop, name=f"mqtt-ping-{self.client_id}", daemon=True)
            self._pinger.start()
        return self

    def subscribe(self, filter_str: str, qos: int = 0, handler=None) -> tuple[int, ...]:
        """Subscribe and block until SUBACK; returns the granted qos codes.

        Raises :class:`SubscriptionRefusedError` if the broker rejects the
        filter (0x80).
        """
        self._require_connected()
        # The handler must be live before the broker can answer: retained
        # messages arrive right behind the SUBACK.
        entry = None
        if handler is not None:
            try:
                entry = (topics.TopicFilter.from_string(filter_str), handler)
            except topics.TopicFilterError as e:
                raise SubscriptionRefusedError(str(e)) from e
        with self._state_lock:
            pid = self._allocate_pid()
            event = threading.Event()
            granted: list = []
            self._pending_subacks[pid] = (event, granted)
            if entry is not None:
                self._handlers.append(entry)
        try:
            self._send(Subscribe(packet_id=pid, topics=((filter_str, qos),)))
            if not event.wait(self.ack_timeout_s * (self.max_retransmits + 1)):
                with self._state_lock:
                    self._pending_subacks.pop(pid, None)
                raise AckTimeoutError(f"no SUBACK for {filter_str!r}")
            if 0x80 in granted:
                raise SubscriptionRefusedError(f"broker refused filter {filter_str!r}")
        except Exception:
            if entry is not None:
                with self._state_lock:
                    if entry in self._handlers:
                        self._handlers.remove(entry)
            raise
        return tuple(granted)

    def publish(self, topic: str, payload: bytes, qos: int = 0, retain: bool = False) -> None:
        """Publish; for qos=1 returns only once the PUBACK has arrived."""
        self._require_connected()
        if qos == 0:
            self._send(Publish(topic=topic, payload=payload, qos=0, retain=retain))
            return
        with self._state_lock:
            pid = self._allocate_pid()
            event = threading.Event()
            self._pending_acks[pid] = event
        try:
            for attempt in range(self.max_retransmits + 1):
                self._require_connected()
                self._send(Publish(topic=topic, payload=payload, qos=1, packet_id=pid, dup=attempt > 0, retain=retain))
                if event.wait(self.ack_timeout_s):
                    return
            raise AckTimeoutError(
                f"no PUBACK for packet {pid} after {self.max_retransmits + 1} attempts"
            )
        finally:
            with self._state_lock:
                self._pending_acks.pop(pid, None)

    def disconnect(self) -> None:
        if self.connected:
            try:
                self._send(Disconnect())
            except (OSError, NotConnectedError):
                pass
        self.close()

    def close(self) -> None:
        self._closing = True
        self._connected.clear()
        if self._transport is not None:
            self._transport.close()
        if self._reader is not None and self._reader is not threading.current_thread():
            self._reader.join(timeout=2.0)
        if self._dispatcher is not None and self._dispatcher is not threading.current_thread():
            self._dispatcher.join(timeout=2.0)

    # -- internals ---------------------------------------------------------

    def _require_connected(self) -> None:
        if not self.connected and self._connack is not None:
            raise NotConnectedError("session closed")
        if self._transport is None:
            raise NotConnectedError("never connected")

    def _allocate_pid(self) -> int:
        pid = self._next_pid
        busy = self._pending_acks.keys() | self._pending_subacks.keys()
        for _ in range(0xFFFF):
            if pid not in busy:
                break
            pid = pid % 0xFFFF + 1
        self._next_pid = pid % 0xFFFF + 1
        return pid

    def _send(self, pkt) -> None:
        transport = self._transport
        if transport is None:
            raise NotConnectedError("never connected")
        data = encode(pkt)
        try:
            with self._send_lock:
                transport.send(data)
        except (OSError, BrokenPipeError) as e:
            self._connected.clear()
            raise NotConnectedError(str(e)) from e

    def _reader_loop(self) -> None:
        buf = b""
        transport = self._transport
        inbound = self._inbound
        try:
            while not self._closing:
                chunk = transport.recv(4096)
                if not chunk:
                    break
                buf += chunk
                while True:
                    try:
                        result = decode(buf)
                    except MqttDecodeError as e:
                        log.warning("client %s: protocol error: %s", self.client_id, e)
                        return
                    if result is None:
                        break
                    pkt, consumed = result
                    buf = buf[consumed:]
                    self._handle(pkt)
        except (OSError, BrokenPipeError):
            pass
        finally:
            self._connected.clear()
            inbound.put(None)  # stop the paired dispatcher

    def _dispatch_loop(self) -> None:
        inbound = self._inbound
        while True:
            pkt = inbound.get()
            if pkt is None:
                return
            self._dispatch_message(pkt)

    def _handle(self, pkt) -> None:
        if isinstance(pkt, Connack):
            self._connack = pkt
            self._connected.set()
        elif isinstance(pkt, Puback):
            with self._state_lock:
                event = self._pending_acks.get(pkt.packet_id)
            if event is not None:
                event.set()
        elif isinstance(pkt, Suback):
            with self._state_lock:
                entry = self._pending_subacks.pop(pkt.packet_id, None)
            if entry is not None:
                event, granted = entry
                granted.extend(pkt.return_codes)
                event.set()
        elif isinstance(pkt, Publish):
            if pkt.qos == 1:
                try:
                    self._send(Puback(packet_id=pkt.packet_id))
                except NotConnectedError:
                    return
            self._inbound.put(pkt)
        elif isinstance(pkt, Pingresp):
            pass

    def _dispatch_message(self, pkt: Publish) -> None:
        if self.packet_tap is not None:
            try:
                self.packet_tap(pkt)
            except Exception:
                log.exception("packet tap failed for %s", pkt.topic)
        with self._state_lock:
            handlers = [h for filt, h in self._handlers if topics.matches(filt, pkt.topic)]
        for handler in handlers:
            try:
                handler(pkt.topic, pkt.payload)
            except Exception:
                log.exception("message handler failed for %s", pkt.topic)
        if self.on_message is not None:
            try:
                self.on_message(pkt.topic, pkt.payload)
            except Exception:
                log.exception("on_message failed for %s", pkt.topic)

    def _ping_loop(self) -> None:
        interval = max(self.keep_alive_s / 2.0, 0.5)
        while self.connected and not self._closing:
            time.sleep(interval)
            try:
                self._send(Pingreq())
            except NotConnectedError:
                return

    def __enter__(self) -> "MqttClient":
        return self

    def __exit__(self, *exc) -> None:
        self.disconnect()


class ReliablePublisher:
    """At-least-once publisher that outlives broker outages.

    Messages are queued and a worker drains them over a QoS-1 session,
    rebuilding the connection (fresh client, same endpoint) whenever a
    publish fails. A message is discarded only after its PUBACK arrives, so
    every accepted message is delivered at least once, possibly late and
    possibly more than once.
    """

    def __init__(
        self,
        host: str,
        port: int,
        *,
        client_id: str | None = None,
        ack_timeout_s: float = 0.5,
        max_retransmits: int = 2,
        retry_interval_s: float = 0.2,
    ):
        self.host = host
        self.port = port
        self.client_id = client_id or f"rp-{uuid.uuid4().hex[:8]}"
        self.ack_timeout_s = ack_timeout_s
        self.max_retransmits = max_retransmits
        self.retry_interval_s = retry_interval_s
        self._queue: queue.Queue = queue.Queue()
        self._cv = threading.Condition()
        self._outstanding = 0
        self._stop = threading.Event()
        self._client: MqttClient | None = None
        self._worker = threading.Thread(target=self._run, name=f"reliable-pub-{self.client_id}", daemon=True)
        self._worker.start()

    def publish(self, topic: str, payload: bytes, qos: int = 1) -> None:
        """Queue a message for at-least-once delivery; returns immediately."""
        if self._stop.is_set():
            raise RuntimeError("publisher closed")
        with self._cv:
            self._outstanding += 1
        self._queue.put((topic, payload, qos))

    def flush(self, timeout_s: float = 10.0) -> bool:
        """Wait until every queued message has been acknowledged."""
        with self._cv:
            return self._cv.wait_for(lambda: self._outstanding == 0, timeout_s)

    @property
    def pending(self) -> int:
        with self._cv:
            return self._outstanding

    def close(self, drain_timeout_s: float = 5.0) -> None:
        self.flush(drain_timeout_s)
        self._stop.set()
        self._queue.put(None)
        self._worker.join(timeout=drain_timeout_s)
        if self._client is not None:
            self._client.close()

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if item is None or self._stop.is_set():
                return
            topic, payload, qos = item
            while not self._stop.is_set():
                try:
                    client = self._ensure_client()
                    client.publish(topic, payload, qos=qos)
                    break
                except (ConnectionError, AckTimeoutError, OSError):
                    if self._client is not None:
                        self._client.close()
                        self._client = None
                    time.sleep(self.retry_interval_s)
            with self._cv:
                self._outstanding -= 1
                self._cv.notify_all()

    def _ensure_client(self) -> MqttClient:
        if self._client is None or not self._client.connected:
            if self._client is not None:
                self._client.close()
            client = MqttClient(
                client_id=self.client_id,
                ack_timeout_s=self.ack_timeout_s,
                max_retransmits=self.max_retransmits,
            )
            client.connect(self.host, self.port, timeout_s=2.0)
            self._client = client
        return self._client
