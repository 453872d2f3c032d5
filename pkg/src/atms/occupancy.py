"""Per-compartment passenger counting from tracked head positions.

A fixed horizontal line in the camera image splits each frame into an
"above" and a "below" zone, separated by a hysteresis dead band so that
jitter at the line does not double-count. A track that moves from above
to below has entered the compartment; below to above means it left.
Current occupancy is entries minus exits, clamped at zero; impossible
negatives are retained as an anomaly count instead of being exposed.

The module is deliberately ignorant of any vision stack: it consumes
``TrackSample`` records (one tracked person per frame) and can replay
them from a JSON-lines file, so everything here is testable offline.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from atms import topics

log = logging.getLogger(__name__)

OCCUPANCY_CHANNEL = "occupancy"

DEFAULT_LINE_Y = 50.0
DEFAULT_HYSTERESIS_PX = 5.0


class Zone(Enum):
    ABOVE = "above"
    BELOW = "below"


@dataclass(frozen=True)
class TrackSample:
    """One tracked person's centroid in one frame."""

    track_id: str
    frame_idx: int
    centroid_y: float
    compartment_id: str

    def __post_init__(self) -> None:
        if not self.track_id:
            raise ValueError("track_id must be non-empty")
        if not self.compartment_id:
            raise ValueError("compartment_id must be non-empty")
        if self.frame_idx < 0:
            raise ValueError(f"frame_idx must be >= 0, got {self.frame_idx!r}")
        if not math.isfinite(self.centroid_y):
            raise ValueError(f"centroid_y must be finite, got {self.centroid_y!r}")


@dataclass(frozen=True)
class CountDelta:
    """What a single ingested sample changed."""

    entered: int = 0
    exited: int = 0
    dropped: bool = False

    @property
    def changed(self) -> bool:
        return bool(self.entered or self.exited)


NO_CHANGE = CountDelta()


@dataclass
class CrossingCounter:
    """Running entry/exit tally for one counting line.

    ``invert`` flips the direction convention for cameras mounted the
    other way around (by default increasing y, i.e. moving down in the
    image, counts as entering).
    """

    line_y: float = DEFAULT_LINE_Y
    hysteresis_px: float = DEFAULT_HYSTERESIS_PX
    invert: bool = False
    lambda_i: int = 0
    lambda_o: int = 0
    anomalies: int = 0
    _zones: dict[str, Zone] = field(default_factory=dict)
    _frames: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not math.isfinite(self.line_y):
            raise ValueError(f"line_y must be finite, got {self.line_y!r}")
        if not (math.isfinite(self.hysteresis_px) and self.hysteresis_px >= 0):
            raise ValueError(f"hysteresis_px must be >= 0, got {self.hysteresis_px!r}")

    def zone_of(self, centroid_y: float) -> Zone | None:
        """Classify a y coordinate; None inside the dead band."""
        if centroid_y < self.line_y - self.hysteresis_px:
            return Zone.ABOVE
        if centroid_y > self.line_y + self.hysteresis_px:
            return Zone.BELOW
        return None


def ingest(counter: CrossingCounter, sample: TrackSample) -> CountDelta:
    """Feed one sample; returns what changed.

    A track only transitions when its centroid clears the dead band on
    the far side; samples inside the band keep the last known zone. A
    frame index that does not advance for its track is dropped and
    counted as an anomaly.
    """
    last_frame = counter._frames.get(sample.track_id)
    if last_frame is not None and sample.frame_idx <= last_frame:
        counter.anomalies += 1
        log.warning(
            "track %s frame regressed (%d after %d), sample dropped",
            sample.track_id, sample.frame_idx, last_frame,
        )
        return CountDelta(dropped=True)
    counter._frames[sample.track_id] = sample.frame_idx

    zone = counter.zone_of(sample.centroid_y)
    if zone is None:
        return NO_CHANGE
    prev = counter._zones.get(sample.track_id)
    counter._zones[sample.track_id] = zone
    if prev is None or prev is zone:
        return NO_CHANGE
    entering = zone is Zone.BELOW
    if counter.invert:
        entering = not entering
    if entering:
        counter.lambda_i += 1
        return CountDelta(entered=1)
    counter.lambda_o += 1
    if counter.lambda_i - counter.lambda_o < 0:
        counter.anomalies += 1
    return CountDelta(exited=1)


@dataclass(frozen=True)
class OccupancyReading:
    compartment_id: str
    lambda_i: int
    lambda_o: int
    lambda_t: int
    anomaly_count: int
    ts_ms: int

    def __post_init__(self) -> None:
        if self.lambda_i < 0 or self.lambda_o < 0 or self.anomaly_count < 0:
            raise ValueError("counts must be >= 0")
        if self.lambda_t != max(0, self.lambda_i - self.lambda_o):
            raise ValueError(
                f"lambda_t must be max(0, lambda_i - lambda_o), got {self.lambda_t!r}"
            )


def reading(counter: CrossingCounter, compartment_id: str, ts_ms: int) -> OccupancyReading:
    return OccupancyReading(
        compartment_id=compartment_id,
        lambda_i=counter.lambda_i,
        lambda_o=counter.lambda_o,
        lambda_t=max(0, counter.lambda_i - counter.lambda_o),
        anomaly_count=counter.anomalies,
        ts_ms=ts_ms,
    )


def reading_payload(r: OccupancyReading) -> bytes:
    return json.dumps(
        {
            "compartment": r.compartment_id,
            "lambda_i": r.lambda_i,
            "lambda_o": r.lambda_o,
            "lambda_t": r.lambda_t,
            "ts_ms": r.ts_ms,
        },
        separators=(",", ":"),
    ).encode("ascii")


def parse_reading(payload: bytes) -> OccupancyReading:
    """Decode an occupancy message. Anomaly counts stay broker-side."""
    try:
        doc = json.loads(payload)
        return OccupancyReading(
            compartment_id=str(doc["compartment"]),
            lambda_i=int(doc["lambda_i"]),
            lambda_o=int(doc["lambda_o"]),
            lambda_t=int(doc["lambda_t"]),
            anomaly_count=0,
            ts_ms=int(doc["ts_ms"]),
        )
    except (ValueError, KeyError, TypeError) as e:
        raise ValueError(f"bad occupancy payload: {e}") from e


def parse_track_line(line: str | bytes) -> TrackSample:
    """Decode one JSON-lines track record.

    Format: {"track":"p7","frame":120,"y":48.5,"compartment":"c1"}
    """
    try:
        doc = json.loads(line)
        return TrackSample(
            track_id=str(doc["track"]),
            frame_idx=int(doc["frame"]),
            centroid_y=float(doc["y"]),
            compartment_id=str(doc["compartment"]),
        )
    except (ValueError, KeyError, TypeError) as e:
        raise ValueError(f"bad track record: {e}") from e


def replay_lines(
    lines: Iterable[str | bytes],
    *,
    line_y: float = DEFAULT_LINE_Y,
    hysteresis_px: float = DEFAULT_HYSTERESIS_PX,
    invert: bool = False,
) -> dict[str, CrossingCounter]:
    """Run a recorded track stream through fresh per-compartment counters."""
    counters: dict[str, CrossingCounter] = {}
    for line in lines:
        if not line or (isinstance(line, str) and not line.strip()):
            continue
        sample = parse_track_line(line)
        counter = counters.get(sample.compartment_id)
        if counter is None:
            counter = counters[sample.compartment_id] = CrossingCounter(
                line_y=line_y, hysteresis_px=hysteresis_px, invert=invert
            )
        ingest(counter, sample)
    return counters


def replay_file(
    path: str,
    *,
    line_y: float = DEFAULT_LINE_Y,
    hysteresis_px: float = DEFAULT_HYSTERESIS_PX,
    invert: bool = False,
) -> dict[str, OccupancyReading]:
    with open(path, "r", encoding="utf-8") as f:
        counters = replay_lines(f, line_y=line_y, hysteresis_px=hysteresis_px, invert=invert)
    return {cid: reading(c, cid, 0) for cid, c in sorted(counters.items())}


class OccupancyService:
    """Counts per compartment for one vehicle and publishes the results.

    Publishes on the vehicle's occupancy channel at QoS 1 whenever a
    count changes, plus full snapshots of every compartment on each
    ``tick()`` (wire that to a timer for the cadence).
    """

    def __init__(
        self,
        address: topics.TopicAddress,
        publish: Callable[[str, bytes, int], object],
        *,
        line_y: float = DEFAULT_LINE_Y,
        hysteresis_px: float = DEFAULT_HYSTERESIS_PX,
        invert: bool = False,
        clock_ms: Callable[[], int] | None = None,
    ) -> None:
        self._topic = topics.render(address.with_channel(OCCUPANCY_CHANNEL))
        self._publish = publish
        self._line_y = line_y
        self._hysteresis_px = hysteresis_px
        self._invert = invert
        self._clock_ms = clock_ms or (lambda: int(time.time() * 1000))
        self._registry = threading.Lock()
        self._counters: dict[str, CrossingCounter] = {}
        self._locks: dict[str, threading.Lock] = {}

    def _compartment(self, compartment_id: str) -> tuple[CrossingCounter, threading.Lock]:
        with self._registry:
            counter = self._counters.get(compartment_id)
            if counter is None:
                counter = self._counters[compartment_id] = CrossingCounter(
                    line_y=self._line_y,
                    hysteresis_px=self._hysteresis_px,
                    invert=self._invert,
                )
                self._locks[compartment_id] = threading.Lock()
            return counter, self._locks[compartment_id]

    def ingest(self, sample: TrackSample) -> CountDelta:
        counter, lock = self._compartment(sample.compartment_id)
        with lock:
            delta = ingest(counter, sample)
            if delta.changed:
                self._emit(sample.compartment_id, counter)
        return delta

    def tick(self) -> None:
        """Publish a snapshot of every compartment seen so far."""
        with self._registry:
            items = [(cid, self._counters[cid], self._locks[cid]) for cid in sorted(self._counters)]
        for cid, counter, lock in items:
            with lock:
                self._emit(cid, counter)

    def readings(self) -> dict[str, OccupancyReading]:
        now = self._clock_ms()
        with self._registry:
            items = [(cid, self._counters[cid], self._locks[cid]) for cid in sorted(self._counters)]
        out = {}
        for cid, counter, lock in items:
            with lock:
                out[cid] = reading(counter, cid, now)
        return out

    def _emit(self, compartment_id: str, counter: CrossingCounter) -> None:
        r = reading(counter, compartment_id, self._clock_ms())
        try:
            self._publish(self._topic, reading_payload(r), 1)
        except Exception:
            log.exception("occupancy publish failed for %s", compartment_id)


def publish_reading(
    r: OccupancyReading,
    publish: Callable[[str, bytes, int], object],
    address: topics.TopicAddress,
) -> None:
    """One-shot publish of a reading on the vehicle's occupancy channel."""
    publish(topics.render(address.with_channel(OCCUPANCY_CHANNEL)), reading_payload(r), 1)
