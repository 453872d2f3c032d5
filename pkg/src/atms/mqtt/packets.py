"""MQTT 3.1.1 control packet codec.

Fixed header (packet type + flags, variable-length Remaining Length), then a
per-type variable header and payload. The decoder is incremental: fed a
partial buffer it reports "need more bytes" instead of consuming, and any
malformed input raises :class:`MqttDecodeError` rather than escaping as an
arbitrary exception.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Union

MAX_REMAINING_LENGTH = 268_435_455  # 4-byte varint ceiling per the standard
MAX_PACKET_ID = 0xFFFF

# Control packet type numbers (fixed header bits 7-4).
CONNECT = 1
CONNACK = 2
PUBLISH = 3
PUBACK = 4
SUBSCRIBE = 8
SUBACK = 9
PINGREQ = 12
PINGRESP = 13
DISCONNECT = 14

_UNSUPPORTED_TYPES = {5, 6, 7, 10, 11}  # QoS-2 family and unsubscribe


class MqttEncodeError(ValueError):
    """Packet cannot be serialized (for example, payload too large)."""


class MqttDecodeError(ValueError):
    """Input bytes are not a valid packet in the supported subset."""


def _check_packet_id(packet_id: int) -> None:
    if not 1 <= packet_id <= MAX_PACKET_ID:
        raise ValueError(f"packet_id must be in [1, 65535], got {packet_id}")


@dataclass(frozen=True)
class Connect:
    client_id: str
    keep_alive_s: int = 0
    clean_session: bool = True

    def __post_init__(self) -> None:
        if not 0 <= self.keep_alive_s <= 0xFFFF:
            raise ValueError(f"keep_alive_s must fit in u16, got {self.keep_alive_s}")


@dataclass(frozen=True)
class Connack:
    return_code: int = 0
    session_present: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.return_code <= 255:
            raise ValueError(f"return_code must fit in a byte, got {self.return_code}")


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes
    qos: int = 0
    packet_id: Optional[int] = None
    dup: bool = False
    retain: bool = False

    def __post_init__(self) -> None:
        if self.qos not in (0, 1):
            raise ValueError(f"qos must be 0 or 1, got {self.qos}")
        if "+" in self.topic or "#" in self.topic:
            raise ValueError(f"publish topic must not contain wildcards: {self.topic!r}")
        if not self.topic:
            raise ValueError("publish topic must be non-empty")
        if self.qos == 1:
            if self.packet_id is None:
                raise ValueError("qos=1 publish requires a packet_id")
            _check_packet_id(self.packet_id)
        elif self.packet_id is not None:
            raise ValueError("qos=0 publish must not carry a packet_id")


@dataclass(frozen=True)
class Puback:
    packet_id: int

    def __post_init__(self) -> None:
        _check_packet_id(self.packet_id)


@dataclass(frozen=True)
class Subscribe:
    packet_id: int
    topics: tuple[tuple[str, int], ...]  # (filter string, requested qos)

    def __post_init__(self) -> None:
        _check_packet_id(self.packet_id)
        object.__setattr__(self, "topics", tuple((f, q) for f, q in self.topics))
        if not self.topics:
            raise ValueError("subscribe must carry at least one filter")
        for filt, qos in self.topics:
            if qos not in (0, 1):
                raise ValueError(f"requested qos must be 0 or 1, got {qos}")
            if not filt:
                raise ValueError("subscribe filter must be non-empty")


@dataclass(frozen=True)
class Suback:
    packet_id: int
    return_codes: tuple[int, ...]  # granted qos per filter, or 0x80 = failure

    def __post_init__(self) -> None:
        _check_packet_id(self.packet_id)
        object.__setattr__(self, "return_codes", tuple(self.return_codes))
        for rc in self.return_codes:
            if rc not in (0, 1, 0x80):
                raise ValueError(f"suback return code must be 0, 1, or 0x80, got {rc}")


@dataclass(frozen=True)
class Pingreq:
    pass


@dataclass(frozen=True)
class Pingresp:
    pass


@dataclass(frozen=True)
class Disconnect:
    pass


MqttPacket = Union[
    Connect, Connack, Publish, Puback, Subscribe, Suback, Pingreq, Pingresp, Disconnect
]


def encode_remaining_length(n: int) -> bytes:
    if n < 0 or n > MAX_REMAINING_LENGTH:
        raise MqttEncodeError(f"remaining length {n} outside [0, {MAX_REMAINING_LENGTH}]")
    out = bytearray()
    while True:
        n, digit = divmod(n, 128)
        out.append(digit | (0x80 if n else 0))
        if not n:
            return bytes(out)


def decode_remaining_length(buf: bytes, start: int) -> Optional[tuple[int, int]]:
    """Return (value, bytes consumed) or None when the buffer is too short.

    Raises :class:`MqttDecodeError` if a 4th byte still has the continuation
    bit set.
    """
    value = 0
    for i in range(4):
        if start + i >= len(buf):
            return None
        byte = buf[start + i]
        value |= (byte & 0x7F) << (7 * i)
        if not byte & 0x80:
            return value, i + 1
    raise MqttDecodeError("malformed remaining length: more than 4 bytes")


def _utf8(s: str) -> bytes:
    data = s.encode("utf-8")
    if len(data) > 0xFFFF:
        raise MqttEncodeError(f"string too long for u16 length prefix: {len(data)} bytes")
    return struct.pack("!H", len(data)) + data


def encode(pkt: MqttPacket) -> bytes:
    """Serialize a packet to its byte-exact wire form."""
    if isinstance(pkt, Connect):
        flags = 0x02 if pkt.clean_session else 0x00
        body = _utf8("MQTT") + bytes([4, flags]) + struct.pack("!H", pkt.keep_alive_s)
        body += _utf8(pkt.client_id)
        return _frame(CONNECT, 0, body)
    if isinstance(pkt, Connack):
        return _frame(CONNACK, 0, bytes([1 if pkt.session_present else 0, pkt.return_code]))
    if isinstance(pkt, Publish):
        flags = (0x08 if pkt.dup else 0) | (pkt.qos << 1) | (0x01 if pkt.retain else 0)
        body = _utf8(pkt.topic)
        if pkt.qos > 0:
            body += struct.pack("!H", pkt.packet_id)
        body += pkt.payload
        return _frame(PUBLISH, flags, body)
    if isinstance(pkt, Puback):
        return _frame(PUBACK, 0, struct.pack("!H", pkt.packet_id))
    if isinstance(pkt, Subscribe):
        body = struct.pack("!H", pkt.packet_id)
        for filt, qos in pkt.topics:
            body += _utf8(filt) + bytes([qos])
        return _frame(SUBSCRIBE, 0x02, body)
    if isinstance(pkt, Suback):
        body = struct.pack("!H", pkt.packet_id) + bytes(pkt.return_codes)
        return _frame(SUBACK, 0, body)
    if isinstance(pkt, Pingreq):
        return _frame(PINGREQ, 0, b"")
    if isinstance(pkt, Pingresp):
        return _frame(PINGRESP, 0, b"")
    if isinstance(pkt, Disconnect):
        return _frame(DISCONNECT, 0, b"")
    raise MqttEncodeError(f"unsupported packet {pkt!r}")


def _frame(ptype: int, flags: int, body: bytes) -> bytes:
    return bytes([(ptype << 4) | flags]) + encode_remaining_length(len(body)) + body


class _Reader:
    """Bounds-checked cursor over one packet body."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int) -> bytes:
        if self.remaining() < n:
            raise MqttDecodeError("truncated packet body")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("!H", self.take(2))[0]

    def utf8(self) -> str:
        n = self.u16()
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise MqttDecodeError(f"invalid utf-8 string: {e}") from e

    def expect_end(self) -> None:
        if self.remaining():
            raise MqttDecodeError(f"{self.remaining()} trailing bytes in packet body")


def decode(buf: bytes) -> Optional[tuple[MqttPacket, int]]:
    """Decode one packet from the head of ``buf``.

    Returns ``(packet, bytes_consumed)``, or ``None`` when the buffer holds
    only a prefix of a packet (nothing is consumed). Malformed input raises
    :class:`MqttDecodeError`; no input sequence raises anything else.
    """
    if len(buf) < 1:
        return None
    first = buf[0]
    ptype = first >> 4
    flags = first & 0x0F
    if ptype == 0 or ptype == 15:
        raise MqttDecodeError(f"reserved packet type {ptype}")
    if ptype in _UNSUPPORTED_TYPES:
        raise MqttDecodeError(f"unsupported packet type {ptype}")
    rl = decode_remaining_length(buf, 1)
    if rl is None:
        return None
    length, rl_size = rl
    total = 1 + rl_size + length
    if len(buf) < total:
        return None
    body = _Reader(bytes(buf[1 + rl_size : total]))
    try:
        pkt = _decode_body(ptype, flags, body)
    except MqttDecodeError:
        raise
    except (ValueError, struct.error) as e:
        # Field constraint violations (bad qos/packet id/topic) are protocol
        # errors too; never let them escape as anything else.
        raise MqttDecodeError(str(e)) from e
    return pkt, total


def _decode_body(ptype: int, flags: int, r: _Reader) -> MqttPacket:
    if ptype == PUBLISH:
        dup = bool(flags & 0x08)
        qos = (flags >> 1) & 0x03
        retain = bool(flags & 0x01)
        if qos == 3:
            raise MqttDecodeError("invalid qos bits 0b11 in publish flags")
        if qos == 2:
            raise MqttDecodeError("qos 2 not supported")
        topic = r.utf8()
        packet_id = r.u16() if qos > 0 else None
        payload = r.take(r.remaining())
        return Publish(topic=topic, payload=payload, qos=qos, packet_id=packet_id, dup=dup, retain=retain)

    if flags != (0x02 if ptype == SUBSCRIBE else 0x00):
        raise MqttDecodeError(f"invalid flags 0x{flags:x} for packet type {ptype}")

    if ptype == CONNECT:
        proto = r.utf8()
        level = r.u8()
        if proto != "MQTT" or level != 4:
            raise MqttDecodeError(f"unsupported protocol {proto!r} level {level}")
        cflags = r.u8()
        if cflags & ~0x02:
            raise MqttDecodeError(f"unsupported connect flags 0x{cflags:02x} (wills/auth excluded)")
        keep_alive = r.u16()
        client_id = r.utf8()
        r.expect_end()
        return Connect(client_id=client_id, keep_alive_s=keep_alive, clean_session=bool(cflags & 0x02))
    if ptype == CONNACK:
        ack_flags = r.u8()
        if ack_flags & ~0x01:
            raise MqttDecodeError(f"invalid connack flags 0x{ack_flags:02x}")
        code = r.u8()
        r.expect_end()
        return Connack(return_code=code, session_present=bool(ack_flags & 0x01))
    if ptype == PUBACK:
        pid = r.u16()
        r.expect_end()
        return Puback(packet_id=pid)
    if ptype == SUBSCRIBE:
        pid = r.u16()
        topics = []
        while r.remaining():
            filt = r.utf8()
            qos = r.u8()
            if qos not in (0, 1):
                raise MqttDecodeError(f"invalid requested qos {qos}")
            topics.append((filt, qos))
        return Subscribe(packet_id=pid, topics=tuple(topics))
    if ptype == SUBACK:
        pid = r.u16()
        codes = tuple(r.take(r.remaining()))
        if not codes:
            raise MqttDecodeError("suback carries no return codes")
        return Suback(packet_id=pid, return_codes=codes)
    if ptype == PINGREQ:
        r.expect_end()
        return Pingreq()
    if ptype == PINGRESP:
        r.expect_end()
        return Pingresp()
    if ptype == DISCONNECT:
        r.expect_end()
        return Disconnect()
    raise MqttDecodeError(f"unhandled packet type {ptype}")
