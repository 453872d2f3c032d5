"""Simulation engine: deterministic motion, noise injection, publishing.

Trains move at constant speed along their route polyline and hold at the
terminus. Every fix interval the true position is displaced by a seeded
Gaussian offset and emitted as a compact JSON payload on the vehicle's
telemetry topic.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
import random
import threading
import time

from atms import topics
from atms.geo import GeoPoint, GpsFix, meters_per_degree, polyline_cumulative_m
from atms.mqtt.client import MqttClient, NotConnectedError
from atms.sim.scenario import Scenario, TrainSpec

log = logging.getLogger(__name__)


class FixParseError(ValueError):
    pass


def fix_topic(train: TrainSpec) -> str:
    return topics.render(train.topic_address())


def fix_payload(fix: GpsFix) -> bytes:
    """Serialize a fix with a fixed key order and 6-decimal coordinates.

    The byte layout is pinned so identical runs produce identical payloads;
    round-tripping through a dict would leave float formatting to chance.
    """
    return (
        '{"vehicle":"%s","ts_ms":%d,"lat_deg":%.6f,"lon_deg":%.6f,"seq":%d}'
        % (fix.vehicle_id, fix.timestamp_ms, fix.point.lat_deg, fix.point.lon_deg, fix.seq)
    ).encode("ascii")


def parse_fix(payload: bytes) -> GpsFix:
    try:
        doc = json.loads(payload)
        return GpsFix(
            vehicle_id=doc["vehicle"],
            point=GeoPoint(float(doc["lat_deg"]), float(doc["lon_deg"])),
            timestamp_ms=int(doc["ts_ms"]),
            seq=int(doc["seq"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FixParseError(f"bad fix payload: {e}") from e


def _interpolate(polyline, cum, dist_m: float) -> GeoPoint:
    if dist_m <= 0.0:
        return polyline[0]
    if dist_m >= cum[-1]:
        return polyline[-1]
    # rightmost segment whose start is at or before dist_m
    lo, hi = 0, len(cum) - 1
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if cum[mid] <= dist_m:
            lo = mid
        else:
            hi = mid
    a, b = polyline[lo], polyline[lo + 1]
    span = cum[lo + 1] - cum[lo]
    f = (dist_m - cum[lo]) / span
    return GeoPoint(
        a.lat_deg + (b.lat_deg - a.lat_deg) * f,
        a.lon_deg + (b.lon_deg - a.lon_deg) * f,
    )


def _noise_rng(seed: int, vehicle_id: str, seq: int) -> random.Random:
    # Keyed digest instead of hash(): stable across processes and runs.
    digest = hashlib.blake2b(
        f"{seed}:{vehicle_id}:{seq}".encode(), digest_size=8
    ).digest()
    return random.Random(int.from_bytes(digest, "big"))


def _displace(point: GeoPoint, dx_m: float, dy_m: float) -> GeoPoint:
    m_lat, m_lon = meters_per_degree(point.lat_deg)
    lat = point.lat_deg + dy_m / m_lat
    lon = point.lon_deg + (dx_m / m_lon if m_lon > 1e-6 else 0.0)
    lat = min(90.0, max(-90.0, lat))
    lon = (lon + 180.0) % 360.0 - 180.0
    return GeoPoint(lat, lon)


def true_position(scenario: Scenario, train: TrainSpec, t_ms: int, _cum=None) -> GeoPoint:
    route = scenario.route_of(train)
    cum = _cum if _cum is not None else polyline_cumulative_m(route.polyline)
    elapsed_s = (t_ms - train.start_time_ms) / 1000.0
    return _interpolate(route.polyline, cum, train.speed_mps * elapsed_s)


def step(scenario: Scenario, vehicle_id: str, t_ms: int, epoch_ms: int = 0) -> GpsFix:
    """Fix for one train at simulation time t_ms (>= its start time).

    Deterministic: the noise draw is keyed by (scenario seed, vehicle, seq),
    so the same call always returns the same fix. Raises KeyError for an
    unknown vehicle.
    """
    train = scenario.train(vehicle_id)
    if t_ms < train.start_time_ms:
        raise ValueError(
            f"t_ms {t_ms} precedes start_time_ms {train.start_time_ms} of {vehicle_id!r}"
        )
    seq = (t_ms - train.start_time_ms) // train.fix_interval_ms + 1
    truth = true_position(scenario, train, t_ms)
    sigma = scenario.noise.sigma_m
    if sigma > 0.0:
        rng = _noise_rng(scenario.seed, vehicle_id, seq)
        emitted = _displace(truth, rng.gauss(0.0, sigma), rng.gauss(0.0, sigma))
    else:
        emitted = truth
    return GpsFix(vehicle_id=vehicle_id, point=emitted, timestamp_ms=epoch_ms + t_ms, seq=seq)


class Simulator:
    """Replays a scenario, handing each due fix to a publish callable.

    ``publish(topic: str, payload: bytes)`` is the only coupling to the bus,
    so tests can collect fixes in a list and the CLI can wire in a real
    client.
    """

    def __init__(self, scenario: Scenario, publish, epoch_ms: int = 0):
        self.scenario = scenario
        self.publish = publish
        self.epoch_ms = epoch_ms
        self._cum = {
            r.route_id: polyline_cumulative_m(r.polyline) for r in scenario.routes
        }

    def events(self, duration_ms: int):
        """Yield (fire_ms, topic, fix) in global time order over [0, duration_ms)."""
        heap = []
        for i, train in enumerate(self.scenario.trains):
            if train.start_time_ms < duration_ms:
                heap.append((train.start_time_ms, i, 1))
        heapq.heapify(heap)
        topic_of = {t.vehicle_id: fix_topic(t) for t in self.scenario.trains}
        while heap:
            fire_ms, i, seq = heapq.heappop(heap)
            train = self.scenario.trains[i]
            truth = true_position(
                self.scenario, train, fire_ms, _cum=self._cum[train.route_id]
            )
            sigma = self.scenario.noise.sigma_m
            if sigma > 0.0:
                rng = _noise_rng(self.scenario.seed, train.vehicle_id, seq)
                emitted = _displace(truth, rng.gauss(0.0, sigma), rng.gauss(0.0, sigma))
            else:
                emitted = truth
            fix = GpsFix(
                vehicle_id=train.vehicle_id,
                point=emitted,
                timestamp_ms=self.epoch_ms + fire_ms,
                seq=seq,
            )
            yield fire_ms, topic_of[train.vehicle_id], fix
            nxt = fire_ms + train.fix_interval_ms
            if nxt < duration_ms:
                heapq.heappush(heap, (nxt, i, seq + 1))

    def run_for(self, duration_ms: int) -> int:
        """Publish every fix due in [0, duration_ms) as fast as possible."""
        n = 0
        for _fire_ms, topic, fix in self.events(duration_ms):
            self.publish(topic, fix_payload(fix))
            n += 1
        return n

    def run_realtime(
        self,
        duration_ms: int,
        stop: threading.Event | None = None,
        speedup: float = 1.0,
    ) -> int:
        """Publish fixes paced by the wall clock (scaled by speedup).

        Payload timestamps stay on the simulation timeline; only the pacing
        uses the wall clock.
        """
        if speedup <= 0:
            raise ValueError("speedup must be > 0")
        wall_start = time.monotonic()
        n = 0
        for fire_ms, topic, fix in self.events(duration_ms):
            due = wall_start + (fire_ms / 1000.0) / speedup
            while True:
                if stop is not None and stop.is_set():
                    return n
                remaining = due - time.monotonic()
                if remaining <= 0:
                    break
                time.sleep(min(remaining, 0.05))
            self.publish(topic, fix_payload(fix))
            n += 1
        return n


class BusPublisher:
    """QoS-0 publisher that reconnects with capped exponential backoff.

    Telemetry favors freshness over reliability: while the broker is down,
    payloads are counted in ``dropped`` and skipped rather than queued.
    """

    def __init__(self, host: str, port: int, client_id: str | None = None,
                 connect_timeout_s: float = 1.0, max_backoff_s: float = 5.0):
        self.host = host
        self.port = port
        self.client_id = client_id
        self.connect_timeout_s = connect_timeout_s
        self.max_backoff_s = max_backoff_s
        self.dropped = 0
        self._client: MqttClient | None = None
        self._backoff_s = 0.25
        self._next_attempt = 0.0
        self._lock = threading.Lock()

    def publish(self, topic: str, payload: bytes, qos: int = 0, retain: bool = False) -> bool:
        with self._lock:
            client = self._ensure_client()
            if client is None:
                self.dropped += 1
                return False
            try:
                client.publish(topic, payload, qos=qos, retain=retain)
                return True
            except (NotConnectedError, ConnectionError, OSError) as e:
                log.warning("bus publish failed, will reconnect: %s", e)
                client.close()
                self._client = None
                self.dropped += 1
                return False

    def close(self) -> None:
        with self._lock:
            if self._client is not None:
                self._client.disconnect()
                self._client = None

    def _ensure_client(self) -> MqttClient | None:
        if self._client is not None and self._client.connected:
            return self._client
        now = time.monotonic()
        if now < self._next_attempt:
            return None
        try:
            client = MqttClient(client_id=self.client_id)
            client.connect(self.host, self.port, timeout_s=self.connect_timeout_s)
        except (ConnectionError, OSError) as e:
            self._next_attempt = now + self._backoff_s
            log.warning(
                "broker %s:%d unreachable (%s); next attempt in %.2fs",
                self.host, self.port, e, self._backoff_s,
            )
            self._backoff_s = min(self._backoff_s * 2.0, self.max_backoff_s)
            return None
        self._client = client
        self._backoff_s = 0.25
        self._next_attempt = 0.0
        log.info("connected to broker %s:%d", self.host, self.port)
        return client
