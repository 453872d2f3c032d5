import json
import random
import socket
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atms.mqtt.broker import EmbeddedBroker
from atms.mqtt.client import MqttClient, ReliablePublisher
from atms.mqtt.transport import memory_pipe
from atms.occupancy import (
    CountDelta,
    CrossingCounter,
    OccupancyReading,
    OccupancyService,
    TrackSample,
    Zone,
    ingest,
    parse_reading,
    parse_track_line,
    reading,
    reading_payload,
    replay_file,
    replay_lines,
)
from atms.topics import parse as parse_topic

ADDR = parse_topic("pts/lk/train/intercity/coastal/t1/occupancy")


def feed(counter, ys, track="p1", start_frame=0, compartment="c1"):
    deltas = []
    for i, y in enumerate(ys):
        deltas.append(
            ingest(counter, TrackSample(track, start_frame + i, float(y), compartment))
        )
    return deltas


def zone_oracle(ys, line_y, hysteresis_px):
    """Batch recount: collapse the zone sequence, count sign changes."""
    zones = []
    for y in ys:
        if y < line_y - hysteresis_px:
            zones.append(Zone.ABOVE)
        elif y > line_y + hysteresis_px:
            zones.append(Zone.BELOW)
    entered = exited = 0
    for prev, cur in zip(zones, zones[1:]):
        if prev is cur:
            continue
        if cur is Zone.BELOW:
            entered += 1
        else:
            exited += 1
    return entered, exited


class TestCrossings:
    def test_single_downward_crossing_counts_entry(self):
        c = CrossingCounter(line_y=50.0)
        feed(c, [10, 30, 49, 70, 90])
        assert (c.lambda_i, c.lambda_o) == (1, 0)
        assert reading(c, "c1", 0).lambda_t == 1

    def test_return_trip_counts_exit(self):
        c = CrossingCounter(line_y=50.0)
        feed(c, [10, 90])
        feed(c, [90, 60, 40, 10], start_frame=10)
        assert (c.lambda_i, c.lambda_o) == (1, 1)
        assert reading(c, "c1", 0).lambda_t == 0

    def test_oscillation_inside_dead_band_counts_nothing(self):
        c = CrossingCounter(line_y=50.0, hysteresis_px=5.0)
        feed(c, [48, 52, 48, 52, 48, 52, 48, 52])
        assert (c.lambda_i, c.lambda_o) == (0, 0)

    def test_jitter_around_band_edge_needs_full_clearance(self):
        c = CrossingCounter(line_y=50.0, hysteresis_px=5.0)
        # dips into the band and back out the same side: no count
        feed(c, [30, 46, 30, 46, 30])
        assert (c.lambda_i, c.lambda_o) == (0, 0)
        # then a real crossing
        feed(c, [30, 50, 70], start_frame=10)
        assert (c.lambda_i, c.lambda_o) == (1, 0)

    def test_band_boundary_is_inside_band(self):
        c = CrossingCounter(line_y=50.0, hysteresis_px=5.0)
        assert c.zone_of(45.0) is None
        assert c.zone_of(55.0) is None
        assert c.zone_of(44.999) is Zone.ABOVE
        assert c.zone_of(55.001) is Zone.BELOW

    def test_track_first_seen_below_line_does_not_count(self):
        c = CrossingCounter(line_y=50.0)
        feed(c, [90, 91, 92])
        assert (c.lambda_i, c.lambda_o) == (0, 0)
        # but its departure upward does
        feed(c, [10], start_frame=5)
        assert (c.lambda_i, c.lambda_o) == (0, 1)

    def test_two_tracks_counted_independently(self):
        c = CrossingCounter(line_y=50.0)
        ingest(c, TrackSample("a", 0, 10.0, "c1"))
        ingest(c, TrackSample("b", 0, 90.0, "c1"))
        ingest(c, TrackSample("a", 1, 90.0, "c1"))
        ingest(c, TrackSample("b", 1, 10.0, "c1"))
        assert (c.lambda_i, c.lambda_o) == (1, 1)

    def test_inverted_camera_flips_direction(self):
        c = CrossingCounter(line_y=50.0, invert=True)
        feed(c, [10, 90])
        assert (c.lambda_i, c.lambda_o) == (0, 1)

    def test_frame_regression_drops_sample(self):
        c = CrossingCounter(line_y=50.0)
        ingest(c, TrackSample("a", 5, 10.0, "c1"))
        delta = ingest(c, TrackSample("a", 5, 90.0, "c1"))
        assert delta == CountDelta(dropped=True)
        delta = ingest(c, TrackSample("a", 4, 90.0, "c1"))
        assert delta.dropped
        assert (c.lambda_i, c.lambda_o) == (0, 0)
        assert c.anomalies == 2
        # the stream recovers at the next advancing frame
        ingest(c, TrackSample("a", 6, 90.0, "c1"))
        assert c.lambda_i == 1

    def test_counter_validation(self):
        with pytest.raises(ValueError):
            CrossingCounter(line_y=float("nan"))
        with pytest.raises(ValueError):
            CrossingCounter(hysteresis_px=-1.0)
        with pytest.raises(ValueError):
            TrackSample("a", -1, 10.0, "c1")
        with pytest.raises(ValueError):
            TrackSample("a", 0, float("inf"), "c1")
        with pytest.raises(ValueError):
            TrackSample("", 0, 1.0, "c1")


class TestOracle:
    def random_walk(self, rng):
        y = rng.uniform(0, 100)
        slope = rng.uniform(-8, 8)
        noise = rng.uniform(0, 6)
        ys = []
        for _ in range(rng.randint(2, 60)):
            ys.append(y)
            y += slope + rng.gauss(0, noise)
            if rng.random() < 0.1:
                slope = -slope  # re-crossings
            y = min(120.0, max(-20.0, y))
        return ys

    def test_thousand_random_trajectories_match_batch_recount(self):
        rng = random.Random(4242)
        for trial in range(1000):
            line_y = rng.uniform(30, 70)
            hyst = rng.choice([0.0, 2.0, 5.0, 9.0])
            ys = self.random_walk(rng)
            c = CrossingCounter(line_y=line_y, hysteresis_px=hyst)
            feed(c, ys)
            expect = zone_oracle(ys, line_y, hyst)
            assert (c.lambda_i, c.lambda_o) == expect, (trial, line_y, hyst, ys)

    def test_monotonicity_while_streaming(self):
        rng = random.Random(7)
        c = CrossingCounter(line_y=50.0, hysteresis_px=3.0)
        last = (0, 0)
        for i in range(500):
            ingest(c, TrackSample("p", i, rng.uniform(0, 100), "c1"))
            assert c.lambda_i >= last[0] and c.lambda_o >= last[1]
            last = (c.lambda_i, c.lambda_o)

    @settings(max_examples=60, deadline=None)
    @given(
        walks=st.lists(
            st.lists(st.floats(min_value=-20, max_value=120, allow_nan=False), min_size=1, max_size=20),
            min_size=1,
            max_size=5,
        ),
        seed=st.integers(0, 2**31),
    )
    def test_track_interleaving_order_does_not_matter(self, walks, seed):
        tracks = [(f"p{i}", ys) for i, ys in enumerate(walks)]
        samples = [
            TrackSample(tid, frame, float(y), "c1")
            for tid, ys in tracks
            for frame, y in enumerate(ys)
        ]
        # any order that keeps each track's own frames increasing
        rng = random.Random(seed)
        shuffled = sorted(samples, key=lambda s: (s.frame_idx, rng.random()))
        a, b = CrossingCounter(), CrossingCounter()
        for s in samples:
            ingest(a, s)
        for s in shuffled:
            ingest(b, s)
        # anomaly tallies are diagnostics and may differ by interleaving
        assert (a.lambda_i, a.lambda_o) == (b.lambda_i, b.lambda_o)


class TestReading:
    def test_direct_arithmetic(self):
        c = CrossingCounter()
        c.lambda_i, c.lambda_o = 5, 2
        assert reading(c, "c1", 123).lambda_t == 3

    def test_zero_is_zero(self):
        assert reading(CrossingCounter(), "c1", 0).lambda_t == 0

    def test_more_exits_than_entries_clamps_and_flags(self):
        c = CrossingCounter(line_y=50.0)
        feed(c, [10, 90], track="in1")  # one entry
        for t in ("out1", "out2", "out3"):
            feed(c, [90, 10], track=t)  # three exits
        r = reading(c, "c1", 0)
        assert (r.lambda_i, r.lambda_o, r.lambda_t) == (1, 3, 0)
        assert r.anomaly_count > 0

    def test_reading_type_rejects_bad_lambda_t(self):
        with pytest.raises(ValueError):
            OccupancyReading("c1", 1, 3, -2, 0, 0)
        with pytest.raises(ValueError):
            OccupancyReading("c1", 5, 2, 4, 0, 0)
        with pytest.raises(ValueError):
            OccupancyReading("c1", -1, 0, 0, 0, 0)

    def test_payload_shape_and_round_trip(self):
        r = OccupancyReading("c1", 5, 2, 3, 9, 1234)
        doc = json.loads(reading_payload(r))
        assert doc == {"compartment": "c1", "lambda_i": 5, "lambda_o": 2, "lambda_t": 3, "ts_ms": 1234}
        back = parse_reading(reading_payload(r))
        assert (back.compartment_id, back.lambda_i, back.lambda_o, back.lambda_t, back.ts_ms) == (
            "c1", 5, 2, 3, 1234,
        )

    def test_parse_rejects_garbage(self):
        for bad in (b"", b"[]", b"{}", b'{"compartment":"c1","lambda_i":1,"lambda_o":0,"lambda_t":0,"ts_ms":5}'):
            with pytest.raises(ValueError):
                parse_reading(bad)


class TestReplay:
    def test_stream_file(self, tmp_path):
        lines = [
            {"track": "p1", "frame": 0, "y": 10.0, "compartment": "c1"},
            {"track": "p1", "frame": 1, "y": 90.0, "compartment": "c1"},
            {"track": "p2", "frame": 0, "y": 90.0, "compartment": "c2"},
            {"track": "p2", "frame": 1, "y": 10.0, "compartment": "c2"},
            {"track": "p3", "frame": 0, "y": 48.0, "compartment": "c1"},
            {"track": "p3", "frame": 1, "y": 52.0, "compartment": "c1"},
        ]
        path = tmp_path / "tracks.jsonl"
        path.write_text("\n".join(json.dumps(l) for l in lines) + "\n\n")
        readings = replay_file(str(path))
        assert readings["c1"].lambda_t == 1
        assert readings["c2"].lambda_t == 0
        assert readings["c2"].lambda_o == 1

    def test_parse_track_line(self):
        s = parse_track_line(b'{"track":"p7","frame":120,"y":48.5,"compartment":"c1"}')
        assert s == TrackSample("p7", 120, 48.5, "c1")
        with pytest.raises(ValueError):
            parse_track_line(b"{}")
        with pytest.raises(ValueError):
            parse_track_line(b"not json")

    def test_replay_matches_live_ingest(self):
        rng = random.Random(99)
        lines = []
        for i, track in enumerate("abcdef"):
            y = rng.uniform(0, 100)
            for frame in range(40):
                y += rng.gauss(0, 10)
                lines.append(json.dumps(
                    {"track": track, "frame": frame, "y": round(y, 2), "compartment": f"c{i % 2}"}
                ))
        counters = replay_lines(lines)
        fresh = {}
        for line in lines:
            s = parse_track_line(line)
            fresh.setdefault(s.compartment_id, CrossingCounter())
            ingest(fresh[s.compartment_id], s)
        for cid, counter in counters.items():
            assert (counter.lambda_i, counter.lambda_o) == (fresh[cid].lambda_i, fresh[cid].lambda_o)


class RecordingBus:
    def __init__(self):
        self.published = []

    def __call__(self, topic, payload, qos):
        self.published.append((topic, payload, qos))


class TestService:
    def test_publishes_on_every_change(self):
        bus = RecordingBus()
        svc = OccupancyService(ADDR, bus, clock_ms=lambda: 777)
        svc.ingest(TrackSample("p1", 0, 10.0, "c1"))
        assert bus.published == []  # zone fix only, no count change
        svc.ingest(TrackSample("p1", 1, 49.0, "c1"))
        assert bus.published == []  # dead band
        svc.ingest(TrackSample("p1", 2, 90.0, "c1"))
        assert len(bus.published) == 1
        topic, payload, qos = bus.published[0]
        assert topic == "pts/lk/train/intercity/coastal/t1/occupancy"
        assert qos == 1
        assert json.loads(payload) == {
            "compartment": "c1", "lambda_i": 1, "lambda_o": 0, "lambda_t": 1, "ts_ms": 777,
        }

    def test_tick_snapshots_all_compartments(self):
        bus = RecordingBus()
        svc = OccupancyService(ADDR, bus, clock_ms=lambda: 1)
        svc.ingest(TrackSample("p1", 0, 10.0, "c1"))
        svc.ingest(TrackSample("p2", 0, 10.0, "c2"))
        bus.published.clear()
        svc.tick()
        docs = [json.loads(p) for _, p, _ in bus.published]
        assert sorted(d["compartment"] for d in docs) == ["c1", "c2"]
        assert all(d["lambda_t"] == 0 for d in docs)

    def test_readings_accessor(self):
        svc = OccupancyService(ADDR, RecordingBus(), clock_ms=lambda: 5)
        svc.ingest(TrackSample("p1", 0, 10.0, "c1"))
        svc.ingest(TrackSample("p1", 1, 90.0, "c1"))
        r = svc.readings()["c1"]
        assert (r.lambda_i, r.lambda_o, r.lambda_t, r.ts_ms) == (1, 0, 1, 5)

    def test_compartments_count_concurrently_without_interference(self):
        svc = OccupancyService(ADDR, lambda *a: None, clock_ms=lambda: 0)
        barrier = threading.Barrier(4)

        def cross(cid, n):
            barrier.wait()
            for k in range(n):
                svc.ingest(TrackSample(f"{cid}-p{k}", 0, 10.0, cid))
                svc.ingest(TrackSample(f"{cid}-p{k}", 1, 90.0, cid))

        threads = [threading.Thread(target=cross, args=(f"c{i}", 25)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        readings = svc.readings()
        assert {cid: r.lambda_i for cid, r in readings.items()} == {f"c{i}": 25 for i in range(4)}


def wait_for(predicate, timeout_s=5.0, interval_s=0.01):
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval_s)
    return predicate()


class TestOnTheBus:
    def test_wildcard_subscriber_receives_reading(self):
        with EmbeddedBroker() as broker:
            got = []
            sub = MqttClient(client_id="dash")
            sub.connect("127.0.0.1", broker.port)
            sub.subscribe("pts/+/train/#", qos=1, handler=lambda t, p: got.append((t, p)))
            pub = MqttClient(client_id="counter")
            pub.connect("127.0.0.1", broker.port)
            try:
                svc = OccupancyService(ADDR, pub.publish, clock_ms=lambda: 42)
                svc.ingest(TrackSample("p1", 0, 10.0, "c1"))
                svc.ingest(TrackSample("p1", 1, 90.0, "c1"))
                assert wait_for(lambda: len(got) == 1)
                topic, payload = got[0]
                assert topic == "pts/lk/train/intercity/coastal/t1/occupancy"
                assert json.loads(payload)["lambda_t"] == 1
            finally:
                pub.disconnect()
                sub.disconnect()

    def test_burst_during_outage_is_delivered_after_restart(self):
        with socket.socket() as probe:
            probe.bind(("127.0.0.1", 0))
            port = probe.getsockname()[1]
        rp = ReliablePublisher("127.0.0.1", port, retry_interval_s=0.05)
        try:
            svc = OccupancyService(ADDR, rp.publish, clock_ms=lambda: 9)
            for k in range(3):  # a burst of entries while the broker is down
                svc.ingest(TrackSample(f"p{k}", 0, 10.0, "c1"))
                svc.ingest(TrackSample(f"p{k}", 1, 90.0, "c1"))
            assert rp.flush(timeout_s=0.3) is False
            assert rp.pending == 3

            broker = EmbeddedBroker(port=port)
            got = []
            sub = MqttClient(client_id="dash")
            a, b = memory_pipe()
            broker.attach(b)
            sub.connect(transport=a)
            sub.subscribe("pts/#", qos=1, handler=lambda t, p: got.append(p))
            broker.start()
            try:
                assert rp.flush(timeout_s=10.0) is True
                assert wait_for(lambda: len(got) >= 3)
                finals = {json.loads(p)["lambda_t"] for p in got}
                assert {1, 2, 3} <= finals
            finally:
                sub.disconnect()
                broker.stop()
        finally:
            rp.close()
