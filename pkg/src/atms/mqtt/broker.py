"""Minimal embedded MQTT 3.1.1 broker.

Runs in-process over TCP (or in-memory transports in tests) so the whole
platform is self-contained; any standard external broker can be swapped in
because the wire format is byte-exact MQTT. Supports QoS 0/1 routing with
standard wildcard matching, per-client-id session supersession, and retained
messages on the ``status`` channel only.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass

from atms import topics
from atms.mqtt import packets
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

RETAINED_CHANNEL = "status"


@dataclass(frozen=True)
class BrokerConfig:
    ack_timeout_s: float = 2.0
    max_retransmits: int = 3
    housekeeping_interval_s: float = 0.2


class _Outbound:
    __slots__ = ("publish", "attempts", "deadline")

    def __init__(self, publish: Publish, deadline: float):
        self.publish = publish
        self.attempts = 1
        self.deadline = deadline


class _Session:
    def __init__(self, broker: "EmbeddedBroker", transport):
        self.broker = broker
        self.transport = transport
        self.client_id: str | None = None
        self.subs: dict[str, int] = {}  # filter string -> granted qos
        self.filters: dict[str, topics.TopicFilter] = {}
        self.inflight: dict[int, _Outbound] = {}
        self.next_pid = 1
        self.send_lock = threading.Lock()
        self.alive = True

    def send_packet(self, pkt) -> None:
        data = encode(pkt)
        with self.send_lock:
            self.transport.send(data)

    def allocate_pid(self) -> int:
        pid = self.next_pid
        for _ in range(packets.MAX_PACKET_ID):
            if pid not in self.inflight:
                break
            pid = pid % packets.MAX_PACKET_ID + 1
        self.next_pid = pid % packets.MAX_PACKET_ID + 1
        return pid

    def close(self) -> None:
        self.alive = False
        self.transport.close()


class EmbeddedBroker:
    """Threaded broker: one reader thread per connection plus a housekeeping
    thread that retransmits unacknowledged QoS-1 deliveries."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, config: BrokerConfig | None = None):
        self.host = host
        self._requested_port = port
        self.config = config or BrokerConfig()
        self._listener: socket.socket | None = None
        self._sessions: list[_Session] = []
        self._by_client_id: dict[str, _Session] = {}
        self._retained: dict[str, tuple[bytes, int]] = {}  # topic -> (payload, qos)
        self._lock = threading.Lock()
        self._running = False
        self._threads: list[threading.Thread] = []
        self._anon_counter = 0

    @property
    def port(self) -> int:
        if self._listener is None:
            raise RuntimeError("broker not started")
        return self._listener.getsockname()[1]

    @property
    def address(self) -> tuple[str, int]:
        return self.host, self.port

    def start(self) -> "EmbeddedBroker":
        if self._running:
            return self
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, self._requested_port))
        listener.listen(64)
        # Closing a socket does not wake a thread blocked in accept(); poll
        # with a timeout so stop() can end the loop promptly.
        listener.settimeout(0.25)
        self._listener = listener
        self._running = True
        self._spawn(self._accept_loop, "mqtt-broker-accept")
        self._spawn(self._housekeeping_loop, "mqtt-broker-housekeeping")
        log.info("broker listening on %s:%d", self.host, self.port)
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
        with self._lock:
            sessions = list(self._sessions)
        for s in sessions:
            s.close()
        for t in self._threads:
            t.join(timeout=2.0)
        self._threads.clear()
        with self._lock:
            self._sessions.clear()
            self._by_client_id.clear()

    def attach(self, transport) -> None:
        """Serve a connection over an arbitrary transport (used by tests)."""
        session = _Session(self, transport)
        with self._lock:
            self._sessions.append(session)
        self._spawn(lambda: self._reader_loop(session), "mqtt-broker-conn")

    # -- internals ---------------------------------------------------------

    def _spawn(self, fn, name: str) -> None:
        t = threading.Thread(target=fn, name=name, daemon=True)
        self._threads = [x for x in self._threads if x.is_alive()]
        self._threads.append(t)
        t.start()

    def _accept_loop(self) -> None:
        while self._running:
            try:
                sock, _addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            if not self._running:
                sock.close()
                return
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.attach(TcpTransport(sock))

    def _reader_loop(self, session: _Session) -> None:
        buf = b""
        try:
            while session.alive:
                chunk = session.transport.recv(4096)
                if not chunk:
                    break
                buf += chunk
                while True:
                    try:
                        result = decode(buf)
                    except MqttDecodeError as e:
                        log.warning("protocol error from %r: %s", session.client_id, e)
                        return
                    if result is None:
                        break
                    pkt, consumed = result
                    buf = buf[consumed:]
                    self._handle(session, pkt)
        except (OSError, BrokenPipeError):
            pass
        finally:
            self._drop_session(session)

    def _handle(self, session: _Session, pkt) -> None:
        if isinstance(pkt, Connect):
            client_id = pkt.client_id
            if not client_id:
                with self._lock:
                    self._anon_counter += 1
                    client_id = f"anon-{self._anon_counter}"
            with self._lock:
                old = self._by_client_id.get(client_id)
                self._by_client_id[client_id] = session
            session.client_id = client_id
            if old is not None and old is not session:
                old.close()  # one live connection per client id
            session.send_packet(Connack(return_code=0))
            return
        if session.client_id is None:
            log.warning("packet before CONNECT; closing connection")
            session.close()
            return
        if isinstance(pkt, Subscribe):
            self._handle_subscribe(session, pkt)
        elif isinstance(pkt, Publish):
            self._handle_publish(session, pkt)
        elif isinstance(pkt, Puback):
            with self._lock:
                session.inflight.pop(pkt.packet_id, None)
        elif isinstance(pkt, Pingreq):
            session.send_packet(Pingresp())
        elif isinstance(pkt, Disconnect):
            session.close()

    def _handle_subscribe(self, session: _Session, pkt: Subscribe) -> None:
        codes = []
        new_filters = []
        with self._lock:
            for filt_str, qos in pkt.topics:
                try:
                    filt = topics.TopicFilter.from_string(filt_str)
                except topics.TopicFilterError:
                    codes.append(0x80)
                    continue
                # Re-subscribing to the same filter replaces the granted qos.
                session.subs[filt_str] = qos
                session.filters[filt_str] = filt
                codes.append(qos)
                new_filters.append((filt, qos))
            retained = list(self._retained.items())
        session.send_packet(Suback(packet_id=pkt.packet_id, return_codes=tuple(codes)))
        for topic, (payload, stored_qos) in retained:
            best = -1
            for filt, qos in new_filters:
                if topics.matches(filt, topic):
                    best = max(best, qos)
            if best >= 0:
                self._deliver(session, topic, payload, min(stored_qos, best), retain=True)

    def _handle_publish(self, session: _Session, pkt: Publish) -> None:
        if pkt.retain:
            self._update_retained(pkt)
        self._dispatch(pkt)
        if pkt.qos == 1:
            session.send_packet(Puback(packet_id=pkt.packet_id))

    def _update_retained(self, pkt: Publish) -> None:
        # Retention is limited to the status channel; elsewhere the flag is
        # ignored and the publish is routed normally.
        try:
            addr = topics.parse(pkt.topic)
        except topics.TopicParseError:
            return
        if addr.channel != RETAINED_CHANNEL:
            return
        with self._lock:
            if len(pkt.payload) == 0:
                self._retained.pop(pkt.topic, None)
            else:
                self._retained[pkt.topic] = (pkt.payload, pkt.qos)

    def _dispatch(self, pkt: Publish) -> None:
        """Deliver once per matching client at min(publish qos, best granted qos)."""
        with self._lock:
            plan = []
            for session in self._sessions:
                if not session.alive or session.client_id is None:
                    continue
                best = -1
                for filt_str, granted in session.subs.items():
                    if topics.matches(session.filters[filt_str], pkt.topic):
                        best = max(best, granted)
                if best >= 0:
                    plan.append((session, min(pkt.qos, best)))
        for session, qos in plan:
            self._deliver(session, pkt.topic, pkt.payload, qos, retain=False)

    def _deliver(self, session: _Session, topic: str, payload: bytes, qos: int, retain: bool) -> None:
        try:
            if qos == 0:
                session.send_packet(Publish(topic=topic, payload=payload, qos=0, retain=retain))
            else:
                with self._lock:
                    pid = session.allocate_pid()
                    out = Publish(topic=topic, payload=payload, qos=1, packet_id=pid, retain=retain)
                    session.inflight[pid] = _Outbound(out, time.monotonic() + self.config.ack_timeout_s)
                session.send_packet(out)
        except (OSError, BrokenPipeError):
            self._drop_session(session)

    def _housekeeping_loop(self) -> None:
        while self._running:
            time.sleep(self.config.housekeeping_interval_s)
            now = time.monotonic()
            with self._lock:
                work = []
                for session in self._sessions:
                    for pid, out in list(session.inflight.items()):
                        if out.deadline > now:
                            continue
                        if out.attempts > self.config.max_retransmits:
                            log.warning(
                                "giving up on qos1 delivery pid=%d to %r after %d attempts",
                                pid, session.client_id, out.attempts,
                            )
                            session.inflight.pop(pid, None)
                            continue
                        out.attempts += 1
                        out.deadline = now + self.config.ack_timeout_s
                        resend = Publish(
                            topic=out.publish.topic,
                            payload=out.publish.payload,
                            qos=1,
                            packet_id=pid,
                            dup=True,
                            retain=out.publish.retain,
                        )
                        work.append((session, resend))
            for session, resend in work:
                try:
                    session.send_packet(resend)
                except (OSError, BrokenPipeError):
                    self._drop_session(session)

    def _drop_session(self, session: _Session) -> None:
        session.close()
        with self._lock:
            if session in self._sessions:
                self._sessions.remove(session)
            if session.client_id and self._by_client_id.get(session.client_id) is session:
                del self._by_client_id[session.client_id]

    def __enter__(self) -> "EmbeddedBroker":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def main(argv=None) -> int:
    """Run the broker standalone: ``python -m atms.mqtt.broker``."""
    import argparse

    p = argparse.ArgumentParser(prog="atms-broker", description="Embedded MQTT broker")
    p.add_argument("--host", default="127.0.0.1", help="bind address (default 127.0.0.1)")
    p.add_argument("--port", type=int, default=1883, help="TCP port (default 1883)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    args = p.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    broker = EmbeddedBroker(host=args.host, port=args.port).start()
    print(f"broker listening on {broker.host}:{broker.port}", flush=True)
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        broker.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
