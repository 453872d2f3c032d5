"""In-memory state the gateway mirrors from the bus plus user registry.

Everything here is fed by a single bus-consumer thread and read by many
HTTP worker threads; one lock per concern keeps the read paths short.
Train positions only ever come from bus messages, and a vehicle's
sequence number never goes backwards, so a REST reader can never observe
a position the simulator did not publish or an older fix after a newer
one.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field

from atms import topics
from atms.alarms import ALARM_CHANNEL, TELEMETRY_CHANNEL
from atms.geo import GpsFix
from atms.occupancy import OCCUPANCY_CHANNEL, OccupancyReading, parse_reading
from atms.sim.engine import FixParseError, parse_fix
from atms.ticketing import TAP_CHANNEL

log = logging.getLogger(__name__)

DEFAULT_STALENESS_MS = 15_000
WS_QUEUE_LIMIT = 1000


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    display_name: str
    token: str
    created_ms: int
    account_id: str | None = None

    def public_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "display_name": self.display_name,
            "account_id": self.account_id,
            "created_ms": self.created_ms,
        }


@dataclass
class TrainSnapshot:
    vehicle_id: str
    fix: GpsFix
    topic: str
    received_wall_ms: int
    occupancy: dict[str, OccupancyReading] = field(default_factory=dict)

    def status(self, now_ms: int, staleness_ms: int) -> str:
        return "active" if now_ms - self.received_wall_ms <= staleness_ms else "stale"


class GatewayState:
    def __init__(
        self,
        *,
        staleness_ms: int = DEFAULT_STALENESS_MS,
        clock_ms=None,
    ) -> None:
        self.staleness_ms = staleness_ms
        self._clock_ms = clock_ms or (lambda: int(time.time() * 1000))
        self._started_ms = self._clock_ms()
        self._lock = threading.RLock()
        self._snapshots: dict[str, TrainSnapshot] = {}
        # occupancy readings for vehicles that have not sent a fix yet
        self._orphan_occupancy: dict[str, dict[str, OccupancyReading]] = {}
        self._users: dict[str, UserProfile] = {}
        self._tokens: dict[str, str] = {}
        self._ws_lock = threading.Lock()
        self._ws_subs: dict[int, tuple[topics.TopicFilter, queue.Queue]] = {}
        self._ws_next_id = 1
        self.metrics: dict[str, int] = {
            "bus_messages": 0,
            "fixes_consumed": 0,
            "occupancy_consumed": 0,
            "alarms_seen": 0,
            "taps_seen": 0,
            "malformed_dropped": 0,
            "ingested_fixes": 0,
            "ws_dropped": 0,
        }

    # -- users ---------------------------------------------------------

    def create_user(self, display_name: str, user_id: str | None = None) -> UserProfile:
        if not display_name or not isinstance(display_name, str):
            raise ValueError("display_name must be a non-empty string")
        with self._lock:
            if user_id is None:
                user_id = f"u-{uuid.uuid4().hex[:8]}"
            elif user_id in self._users:
                raise KeyError(user_id)
            profile = UserProfile(
                user_id=user_id,
                display_name=display_name,
                token=uuid.uuid4().hex,
                created_ms=self._clock_ms(),
            )
            self._users[user_id] = profile
            self._tokens[profile.token] = user_id
            return profile

    def get_user(self, user_id: str) -> UserProfile | None:
        with self._lock:
            return self._users.get(user_id)

    def user_exists(self, user_id: str) -> bool:
        return self.get_user(user_id) is not None

    def user_for_token(self, token: str) -> UserProfile | None:
        with self._lock:
            user_id = self._tokens.get(token)
            return self._users.get(user_id) if user_id else None

    def link_account(self, user_id: str, account_id: str) -> UserProfile:
        with self._lock:
            profile = self._users[user_id]
            if profile.account_id is not None:
                raise ValueError(f"user {user_id} already has account {profile.account_id}")
            linked = UserProfile(
                user_id=profile.user_id,
                display_name=profile.display_name,
                token=profile.token,
                created_ms=profile.created_ms,
                account_id=account_id,
            )
            self._users[user_id] = linked
            return linked

    # -- train snapshots ------------------------------------------------

    def snapshot(self, vehicle_id: str) -> TrainSnapshot | None:
        with self._lock:
            return self._snapshots.get(vehicle_id)

    def snapshots(self) -> list[TrainSnapshot]:
        with self._lock:
            return [self._snapshots[v] for v in sorted(self._snapshots)]

    def occupancy_for(self, vehicle_id: str) -> dict[str, OccupancyReading] | None:
        with self._lock:
            snap = self._snapshots.get(vehicle_id)
            if snap is not None:
                return dict(snap.occupancy)
            orphans = self._orphan_occupancy.get(vehicle_id)
            return dict(orphans) if orphans is not None else None

    def now_ms(self) -> int:
        return self._clock_ms()

    def uptime_s(self) -> float:
        return (self._clock_ms() - self._started_ms) / 1000.0

    # -- bus consumption -------------------------------------------------

    def handle_bus(self, topic: str, payload: bytes) -> None:
        """Single entry point for every message the gateway's client sees."""
        with self._lock:
            self.metrics["bus_messages"] += 1
        try:
            addr = topics.parse(topic)
        except topics.TopicParseError:
            self._count_malformed(topic, "unparseable topic")
            return
        if addr.channel == TELEMETRY_CHANNEL:
            self._consume_fix(addr, topic, payload)
        elif addr.channel == OCCUPANCY_CHANNEL:
            self._consume_occupancy(addr, payload)
        elif addr.channel == ALARM_CHANNEL:
            with self._lock:
                self.metrics["alarms_seen"] += 1
        elif addr.channel == TAP_CHANNEL:
            with self._lock:
                self.metrics["taps_seen"] += 1
        self._fan_out(topic, payload)

    def _consume_fix(self, addr: topics.TopicAddress, topic: str, payload: bytes) -> None:
        try:
            fix = parse_fix(payload)
        except FixParseError as e:
            self._count_malformed(topic, str(e))
            return
        if fix.vehicle_id != addr.vehicle_id:
            self._count_malformed(topic, "vehicle mismatch")
            return
        now = self._clock_ms()
        with self._lock:
            snap = self._snapshots.get(fix.vehicle_id)
            if snap is None:
                self._snapshots[fix.vehicle_id] = TrainSnapshot(
                    vehicle_id=fix.vehicle_id,
                    fix=fix,
                    topic=topic,
                    received_wall_ms=now,
                    occupancy=self._orphan_occupancy.pop(fix.vehicle_id, {}),
                )
            elif fix.seq > snap.fix.seq:
                snap.fix = fix
                snap.topic = topic
                snap.received_wall_ms = now
            # stale or duplicate seq: keep the newer fix we already have
            self.metrics["fixes_consumed"] += 1

    def _consume_occupancy(self, addr: topics.TopicAddress, payload: bytes) -> None:
        try:
            reading = parse_reading(payload)
        except ValueError as e:
            self._count_malformed(addr.vehicle_id, str(e))
            return
        with self._lock:
            snap = self._snapshots.get(addr.vehicle_id)
            if snap is not None:
                snap.occupancy[reading.compartment_id] = reading
            else:
                # occupancy can arrive before the first fix; keep it aside
                self._orphan_occupancy.setdefault(addr.vehicle_id, {})[
                    reading.compartment_id
                ] = reading
            self.metrics["occupancy_consumed"] += 1

    def _count_malformed(self, context: str, reason: str) -> None:
        with self._lock:
            self.metrics["malformed_dropped"] += 1
        log.warning("dropped malformed bus message (%s): %s", context, reason)

    # -- websocket fan-out ------------------------------------------------

    def add_ws(self, filt: topics.TopicFilter) -> int:
        q: queue.Queue = queue.Queue(maxsize=WS_QUEUE_LIMIT)
        with self._ws_lock:
            sub_id = self._ws_next_id
            self._ws_next_id += 1
            self._ws_subs[sub_id] = (filt, q)
        return sub_id

    def remove_ws(self, sub_id: int) -> None:
        with self._ws_lock:
            self._ws_subs.pop(sub_id, None)

    def ws_queue(self, sub_id: int) -> queue.Queue | None:
        with self._ws_lock:
            entry = self._ws_subs.get(sub_id)
            return entry[1] if entry else None

    def ws_client_count(self) -> int:
        with self._ws_lock:
            return len(self._ws_subs)

    def _fan_out(self, topic: str, payload: bytes) -> None:
        event = {
            "topic": topic,
            "payload": payload.decode("utf-8", errors="replace"),
            "ts_ms": self._clock_ms(),
        }
        with self._ws_lock:
            subs = list(self._ws_subs.values())
        for filt, q in subs:
            if topics.matches(filt, topic):
                try:
                    q.put_nowait(event)
                except queue.Full:
                    with self._lock:
                        self.metrics["ws_dropped"] += 1

    def metrics_dict(self) -> dict:
        with self._lock:
            out = dict(self.metrics)
        out["ws_clients"] = self.ws_client_count()
        out["trains_tracked"] = len(self._snapshots)
        out["uptime_s"] = round(self.uptime_s(), 3)
        return out
