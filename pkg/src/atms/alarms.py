"""Destination alarms: arm a point and a radius, get told once on approach.

An alarm latches: it fires on the first fix whose great-circle distance to
the destination is at or below the threshold, then never again. Firing
produces a JSON notification on the vehicle's alarms channel at QoS 1.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass, replace
from enum import Enum

from atms import topics
from atms.geo import GeoPoint, GpsFix, distance_to_destination
from atms.sim.engine import FixParseError, parse_fix

log = logging.getLogger(__name__)

TELEMETRY_CHANNEL = "telemetry/gps"
ALARM_CHANNEL = "alarms"


class AlarmStateError(RuntimeError):
    """Raised on a transition the alarm lifecycle does not allow."""


class UnknownAlarmError(KeyError):
    pass


class UnknownUserError(KeyError):
    pass


class AlarmState(str, Enum):
    ARMED = "armed"
    FIRED = "fired"
    CANCELLED = "cancelled"


@dataclass(frozen=True)
class DestinationAlarm:
    alarm_id: str
    user_id: str
    vehicle_id: str
    destination: GeoPoint
    threshold_m: float
    state: AlarmState = AlarmState.ARMED
    fired_at_ms: int | None = None
    created_at_ms: int = 0

    def __post_init__(self) -> None:
        if not self.threshold_m > 0:
            raise ValueError(f"threshold_m must be > 0, got {self.threshold_m!r}")
        if (self.fired_at_ms is not None) != (self.state is AlarmState.FIRED):
            raise ValueError("fired_at_ms must be set exactly when state is fired")


@dataclass(frozen=True)
class AlarmNotification:
    alarm_id: str
    user_id: str
    vehicle_id: str
    distance_m: float
    ts_ms: int

    def payload(self) -> bytes:
        doc = {
            "alarm_id": self.alarm_id,
            "user_id": self.user_id,
            "vehicle": self.vehicle_id,
            "distance_m": round(self.distance_m, 3),
            "ts_ms": self.ts_ms,
        }
        return json.dumps(doc, separators=(",", ":")).encode("ascii")


def parse_notification(payload: bytes) -> AlarmNotification:
    try:
        doc = json.loads(payload)
        return AlarmNotification(
            alarm_id=doc["alarm_id"],
            user_id=doc["user_id"],
            vehicle_id=doc["vehicle"],
            distance_m=float(doc["distance_m"]),
            ts_ms=int(doc["ts_ms"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ValueError(f"bad alarm payload: {e}") from e


def evaluate_fix(alarm: DestinationAlarm, fix: GpsFix) -> AlarmNotification | None:
    """Pure single-fix evaluation; None means the alarm state is unchanged.

    A non-armed alarm always evaluates to None. A fix for a different
    vehicle is a caller bug and is rejected.
    """
    if fix.vehicle_id != alarm.vehicle_id:
        raise ValueError(
            f"fix for {fix.vehicle_id!r} evaluated against alarm on {alarm.vehicle_id!r}"
        )
    if alarm.state is not AlarmState.ARMED:
        return None
    d = distance_to_destination(fix, alarm.destination)
    if d <= alarm.threshold_m:
        return AlarmNotification(
            alarm_id=alarm.alarm_id,
            user_id=alarm.user_id,
            vehicle_id=alarm.vehicle_id,
            distance_m=d,
            ts_ms=fix.timestamp_ms,
        )
    return None


class AlarmService:
    """Holds alarms, consumes the telemetry stream, emits notifications.

    ``publish(topic, payload, qos)`` is injected so callers choose the
    delivery mechanism; pair it with an at-least-once publisher to ride out
    broker outages. ``user_exists`` (if given) gates arm() on registration.

    One lock serializes all state changes: alarm counts are small and fix
    evaluation is microseconds, so per-vehicle sharding would buy nothing.
    """

    def __init__(self, publish=None, user_exists=None, clock_ms=None):
        self._publish = publish
        self._user_exists = user_exists
        self._clock_ms = clock_ms or (lambda: int(time.time() * 1000))
        self._lock = threading.RLock()
        self._alarms: dict[str, DestinationAlarm] = {}
        self._last_seq: dict[str, int] = {}
        self._vehicle_addr: dict[str, topics.TopicAddress] = {}

    # -- management ----------------------------------------------------------

    def arm(
        self,
        user_id: str,
        vehicle_id: str,
        destination: GeoPoint,
        threshold_m: float,
    ) -> DestinationAlarm:
        """Create an armed alarm; re-arming an identical armed one is a no-op
        returning the original (idempotent retries)."""
        if self._user_exists is not None and not self._user_exists(user_id):
            raise UnknownUserError(user_id)
        with self._lock:
            for a in self._alarms.values():
                if (
                    a.state is AlarmState.ARMED
                    and a.user_id == user_id
                    and a.vehicle_id == vehicle_id
                    and a.destination == destination
                    and a.threshold_m == threshold_m
                ):
                    return a
            alarm = DestinationAlarm(
                alarm_id=f"al-{uuid.uuid4().hex[:10]}",
                user_id=user_id,
                vehicle_id=vehicle_id,
                destination=destination,
                threshold_m=threshold_m,
                created_at_ms=self._clock_ms(),
            )
            self._alarms[alarm.alarm_id] = alarm
            return alarm

    def cancel(self, alarm_id: str) -> DestinationAlarm:
        with self._lock:
            alarm = self._alarms.get(alarm_id)
            if alarm is None:
                raise UnknownAlarmError(alarm_id)
            if alarm.state is AlarmState.CANCELLED:
                return alarm  # repeated cancel is harmless
            if alarm.state is AlarmState.FIRED:
                raise AlarmStateError(f"alarm {alarm_id} already fired")
            alarm = replace(alarm, state=AlarmState.CANCELLED)
            self._alarms[alarm_id] = alarm
            return alarm

    def get(self, alarm_id: str) -> DestinationAlarm:
        with self._lock:
            alarm = self._alarms.get(alarm_id)
            if alarm is None:
                raise UnknownAlarmError(alarm_id)
            return alarm

    def list_alarms(self, user_id: str | None = None) -> list[DestinationAlarm]:
        with self._lock:
            out = list(self._alarms.values())
        if user_id is not None:
            out = [a for a in out if a.user_id == user_id]
        return out

    # -- fix intake ----------------------------------------------------------

    def evaluate(self, fix: GpsFix) -> list[AlarmNotification]:
        """Run one fix through every armed alarm on that vehicle.

        Fixes at or below the last evaluated seq for the vehicle are stale
        (duplicates or reordering) and are dropped before evaluation.
        """
        fired: list[tuple[DestinationAlarm, AlarmNotification]] = []
        with self._lock:
            if fix.seq <= self._last_seq.get(fix.vehicle_id, 0):
                return []
            self._last_seq[fix.vehicle_id] = fix.seq
            for alarm in self._alarms.values():
                if alarm.vehicle_id != fix.vehicle_id or alarm.state is not AlarmState.ARMED:
                    continue
                note = evaluate_fix(alarm, fix)
                if note is not None:
                    updated = replace(
                        alarm, state=AlarmState.FIRED, fired_at_ms=fix.timestamp_ms
                    )
                    self._alarms[alarm.alarm_id] = updated
                    fired.append((updated, note))
        for _alarm, note in fired:
            self._emit(note)
        return [note for _, note in fired]

    def handle_fix(self, topic: str, payload: bytes) -> list[AlarmNotification]:
        """Bus entry point; tolerant of foreign topics and bad payloads."""
        try:
            addr = topics.parse(topic)
        except topics.TopicParseError:
            log.debug("ignoring message on unparseable topic %r", topic)
            return []
        if addr.channel != TELEMETRY_CHANNEL:
            return []
        try:
            fix = parse_fix(payload)
        except FixParseError as e:
            log.warning("dropping bad fix on %s: %s", topic, e)
            return []
        if fix.vehicle_id != addr.vehicle_id:
            log.warning(
                "dropping fix: payload vehicle %r does not match topic %r",
                fix.vehicle_id, topic,
            )
            return []
        with self._lock:
            self._vehicle_addr[fix.vehicle_id] = addr
        return self.evaluate(fix)

    def attach(self, client) -> None:
        """Subscribe this service to the telemetry stream of an MQTT client."""
        client.subscribe("pts/+/train/#", qos=0, handler=self.handle_fix)

    # -- internals -----------------------------------------------------------

    def _emit(self, note: AlarmNotification) -> None:
        if self._publish is None:
            return
        with self._lock:
            addr = self._vehicle_addr.get(note.vehicle_id)
        if addr is None:
            log.warning(
                "alarm %s fired but no topic known for vehicle %s; not published",
                note.alarm_id, note.vehicle_id,
            )
            return
        topic = topics.render(addr.with_channel(ALARM_CHANNEL))
        try:
            self._publish(topic, note.payload(), 1)
        except Exception:
            log.exception("alarm notification publish failed for %s", note.alarm_id)
