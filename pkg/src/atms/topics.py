"""Standardized transport topic scheme for the MQTT bus.

Every producer and consumer in the platform shares one topic grammar:

    pts/{region}/{method}/{travel_service}/{line_id}/{vehicle_id}/{channel}

``pts`` is a fixed root that namespaces all platform traffic. Region comes
first so traffic can be sharded to the nearest broker by prefix. Method
distinguishes transport modes (train, bus, ...), travel_service the service
class (long-distance, short-distance, ...). The channel is a closed
vocabulary so services can enumerate their subscriptions.

Filters use standard MQTT wildcards: ``+`` matches exactly one level and a
terminal ``#`` matches the remaining levels (including the parent level).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

TOPIC_ROOT = "pts"

#: Closed channel vocabulary; a channel is one or two topic levels.
CHANNELS = ("telemetry/gps", "occupancy", "tickets/taps", "alarms", "status")

_TOKEN_RE = re.compile(r"^[a-z0-9-]+$")


class TopicParseError(ValueError):
    """A topic string that does not conform to the platform grammar.

    ``reason`` is a stable machine-readable code: one of wrong-prefix,
    level-count, empty-level, bad-token, unknown-channel.
    """

    def __init__(self, reason: str, detail: str):
        super().__init__(f"{reason}: {detail}")
        self.reason = reason


class TopicFilterError(ValueError):
    """A subscription filter that violates wildcard or token rules."""


def is_valid_token(token: str) -> bool:
    return bool(_TOKEN_RE.match(token))


def _check_token(name: str, token: str) -> None:
    if not is_valid_token(token):
        raise ValueError(f"{name} must match [a-z0-9-]+, got {token!r}")


@dataclass(frozen=True)
class TopicAddress:
    """Parsed form of a platform topic."""

    region: str
    method: str
    travel_service: str
    line_id: str
    vehicle_id: str
    channel: str

    def __post_init__(self) -> None:
        _check_token("region", self.region)
        _check_token("method", self.method)
        _check_token("travel_service", self.travel_service)
        _check_token("line_id", self.line_id)
        _check_token("vehicle_id", self.vehicle_id)
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}, expected one of {CHANNELS}")

    def with_channel(self, channel: str) -> "TopicAddress":
        return replace(self, channel=channel)


def render(addr: TopicAddress) -> str:
    """Topic string for an address; inverse of :func:`parse`."""
    return "/".join(
        (
            TOPIC_ROOT,
            addr.region,
            addr.method,
            addr.travel_service,
            addr.line_id,
            addr.vehicle_id,
            addr.channel,
        )
    )


def parse(topic: str) -> TopicAddress:
    """Parse a topic string back into a :class:`TopicAddress`.

    Raises :class:`TopicParseError` with a distinct ``reason`` for each
    failure mode.
    """
    levels = topic.split("/")
    if not levels or levels[0] != TOPIC_ROOT:
        raise TopicParseError("wrong-prefix", f"expected root {TOPIC_ROOT!r} in {topic!r}")
    # Root + 5 address levels + 1..2 channel levels.
    if not 7 <= len(levels) <= 8:
        raise TopicParseError("level-count", f"expected 7 or 8 levels, got {len(levels)} in {topic!r}")
    for lvl in levels:
        if lvl == "":
            raise TopicParseError("empty-level", f"empty level in {topic!r}")
    for lvl in levels[1:6]:
        if not is_valid_token(lvl):
            raise TopicParseError("bad-token", f"illegal token {lvl!r} in {topic!r}")
    channel = "/".join(levels[6:])
    if channel not in CHANNELS:
        raise TopicParseError("unknown-channel", f"{channel!r} not in {CHANNELS}")
    return TopicAddress(
        region=levels[1],
        method=levels[2],
        travel_service=levels[3],
        line_id=levels[4],
        vehicle_id=levels[5],
        channel=channel,
    )


@dataclass(frozen=True)
class TopicFilter:
    """A subscription pattern: literal levels, ``+``, or a terminal ``#``."""

    levels: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise TopicFilterError("filter must have at least one level")
        for i, lvl in enumerate(self.levels):
            if lvl == "#":
                if i != len(self.levels) - 1:
                    raise TopicFilterError(f"'#' must be the final level: {self}")
            elif lvl != "+" and not is_valid_token(lvl):
                raise TopicFilterError(f"illegal filter token {lvl!r}")

    @classmethod
    def from_string(cls, filter_str: str) -> "TopicFilter":
        return cls(tuple(filter_str.split("/")))

    def __str__(self) -> str:
        return "/".join(self.levels)


def matches(filt: TopicFilter | str, topic: str) -> bool:
    """True iff ``topic`` matches the filter under MQTT 3.1.1 rules.

    ``#`` also matches its parent level (filter ``a/#`` matches topic ``a``),
    and ``+`` matches any single level, including an empty one.
    """
    if isinstance(filt, str):
        filt = TopicFilter.from_string(filt)
    levels = topic.split("/")
    for i, fl in enumerate(filt.levels):
        if fl == "#":
            # Matches everything from here on, including nothing at all.
            return i <= len(levels)
        if i >= len(levels):
            return False
        if fl != "+" and fl != levels[i]:
            return False
    return len(levels) == len(filt.levels)
