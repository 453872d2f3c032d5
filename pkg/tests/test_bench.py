import json
import os
import random
import socket
import statistics
import threading
import time

import pytest

from atms.bench.cli import main as bench_main
from atms.bench.proxy import DelayProxy
from atms.bench.report import (
    BenchReport,
    LatencySample,
    Transport,
    load_report,
    percentile,
    report_from_dict,
    report_to_dict,
    save_report,
    summarize,
)
from atms.bench.runners import IngestSink, measure_http, measure_mqtt, run_comparison
from atms.mqtt.broker import EmbeddedBroker


def mqtt_samples(*latencies):
    return [LatencySample(Transport.MQTT, i, v) for i, v in enumerate(latencies)]


def http_samples(*latencies):
    return [LatencySample(Transport.HTTP, i, v) for i, v in enumerate(latencies)]


class TestPercentile:
    def test_nearest_rank(self):
        values = list(range(1, 11))  # 1..10
        assert percentile(values, 50) == 5
        assert percentile(values, 95) == 10
        assert percentile(values, 100) == 10
        assert percentile(values, 1) == 1

    def test_single_value(self):
        assert percentile([42.0], 50) == 42.0
        assert percentile([42.0], 95) == 42.0

    def test_rejects_empty_and_bad_q(self):
        with pytest.raises(ValueError):
            percentile([], 50)
        with pytest.raises(ValueError):
            percentile([1.0], 0)
        with pytest.raises(ValueError):
            percentile([1.0], 101)


class TestSummarize:
    def test_mean_of_three(self):
        report = summarize(mqtt_samples(100.0, 200.0, 300.0))
        assert report.phi_m_ms == 200.0
        assert report.n == {"mqtt": 3}
        assert report.ratio is None

    def test_single_sample(self):
        report = summarize(mqtt_samples(42.0))
        assert report.phi_m_ms == 42.0
        assert report.p50_ms["mqtt"] == 42.0
        assert report.p95_ms["mqtt"] == 42.0

    def test_ratio_when_both_present(self):
        report = summarize(mqtt_samples(100.0, 100.0) + http_samples(150.0, 250.0))
        assert report.phi_m_ms == 100.0
        assert report.phi_h_ms == 200.0
        assert report.ratio == 2.0

    def test_mean_matches_resummation_exactly(self):
        rng = random.Random(5)
        values = [rng.uniform(0.1, 500.0) for _ in range(997)]
        report = summarize(mqtt_samples(*values))
        kept = [s.latency_ms for s in report.samples if s.transport is Transport.MQTT]
        assert report.phi_m_ms == sum(kept) / len(kept)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            summarize([])

    def test_sample_validation(self):
        with pytest.raises(ValueError):
            LatencySample(Transport.MQTT, 0, -1.0)
        with pytest.raises(ValueError):
            LatencySample(Transport.MQTT, 0, float("nan"))
        with pytest.raises(ValueError):
            LatencySample("mqtt-ish", 0, 1.0)

    def test_report_invariants(self):
        with pytest.raises(ValueError):
            BenchReport(n={}, phi_m_ms=None, phi_h_ms=None, p50_ms={}, p95_ms={},
                        ratio=None, failures={}, samples=())
        with pytest.raises(ValueError):
            BenchReport(n={"mqtt": 0}, phi_m_ms=1.0, phi_h_ms=None, p50_ms={}, p95_ms={},
                        ratio=None, failures={}, samples=())
        with pytest.raises(ValueError):
            BenchReport(n={"mqtt": 1}, phi_m_ms=1.0, phi_h_ms=None, p50_ms={}, p95_ms={},
                        ratio=2.0, failures={}, samples=())


class TestReportFile:
    def test_round_trip_preserves_raw_samples(self, tmp_path):
        rng = random.Random(11)
        samples = mqtt_samples(*(rng.uniform(1, 300) for _ in range(50))) + http_samples(
            *(rng.uniform(1, 600) for _ in range(50))
        )
        report = summarize(samples, failures={"mqtt": 2, "http": 5}, mqtt_qos=1,
                           http_mode="per-request")
        path = str(tmp_path / "report.json")
        save_report(report, path)
        loaded = load_report(path)
        assert loaded == report
        # the persisted samples alone are enough to recompute the means
        kept = [s.latency_ms for s in loaded.samples if s.transport is Transport.MQTT]
        assert loaded.phi_m_ms == sum(kept) / len(kept)

    def test_json_shape(self, tmp_path):
        report = summarize(mqtt_samples(10.0) + http_samples(20.0))
        doc = report_to_dict(report)
        assert set(doc) >= {"n", "phi_m_ms", "phi_h_ms", "ratio", "p50", "p95",
                            "failures", "samples"}
        assert doc["samples"][0] == {"transport": "mqtt", "seq": 0, "latency_ms": 10.0}

    def test_bad_document_rejected(self):
        with pytest.raises(ValueError):
            report_from_dict({"n": {"mqtt": 1}})


class EchoServer:
    def __init__(self):
        self.sock = socket.socket()
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(16)
        self.port = self.sock.getsockname()[1]
        threading.Thread(target=self._serve, daemon=True).start()

    def _serve(self):
        while True:
            try:
                conn, _ = self.sock.accept()
            except OSError:
                return
            threading.Thread(target=self._pump, args=(conn,), daemon=True).start()

    def _pump(self, conn):
        while True:
            try:
                data = conn.recv(65536)
            except OSError:
                data = b""
            if not data:
                conn.close()
                return
            conn.sendall(data)

    def close(self):
        self.sock.close()


@pytest.fixture()
def echo():
    server = EchoServer()
    yield server
    server.close()


def rtt_through(port, payload=b"x", reps=5):
    with socket.create_connection(("127.0.0.1", port)) as s:
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        rtts = []
        for _ in range(reps):
            t0 = time.perf_counter()
            s.sendall(payload)
            got = b""
            while len(got) < len(payload):
                chunk = s.recv(len(payload) - len(got))
                if not chunk:
                    raise ConnectionError("echo closed early")
                got += chunk
            rtts.append((time.perf_counter() - t0) * 1000)
        return rtts


class TestDelayProxy:
    def test_zero_delay_passthrough_is_byte_identical(self, echo):
        blob = bytes(random.Random(3).randrange(256) for _ in range(70_000))
        with DelayProxy("127.0.0.1", echo.port) as proxy:
            with socket.create_connection(("127.0.0.1", proxy.port)) as s:
                s.sendall(blob)
                got = b""
                while len(got) < len(blob):
                    chunk = s.recv(65536)
                    if not chunk:
                        break
                    got += chunk
        assert got == blob

    def test_fifty_ms_delay_doubles_into_rtt(self, echo):
        with DelayProxy("127.0.0.1", echo.port, one_way_delay_ms=50.0) as proxy:
            rtts = rtt_through(proxy.port)
        assert abs(statistics.median(rtts) - 100.0) <= 5.0

    def test_handshake_emulation_charges_first_exchange_once(self, echo):
        with DelayProxy("127.0.0.1", echo.port, one_way_delay_ms=50.0,
                        emulate_handshake=True) as proxy:
            rtts = rtt_through(proxy.port, reps=3)
        assert abs(rtts[0] - 200.0) <= 15.0
        assert abs(rtts[1] - 100.0) <= 10.0
        assert abs(rtts[2] - 100.0) <= 10.0

    def test_rapid_chunks_share_the_delay_line(self, echo):
        with DelayProxy("127.0.0.1", echo.port, one_way_delay_ms=50.0) as proxy:
            with socket.create_connection(("127.0.0.1", proxy.port)) as s:
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                t0 = time.perf_counter()
                s.sendall(b"a")
                s.sendall(b"b")
                got = b""
                while len(got) < 2:
                    got += s.recv(2)
                elapsed = (time.perf_counter() - t0) * 1000
        assert got == b"ab"
        assert elapsed < 150.0  # serial per-chunk sleeps would exceed 200

    def test_teardown_mid_stream_closes_client(self, echo):
        proxy = DelayProxy("127.0.0.1", echo.port).start()
        s = socket.create_connection(("127.0.0.1", proxy.port))
        s.sendall(b"x")
        assert s.recv(1) == b"x"
        proxy.stop()
        s.settimeout(2.0)
        try:
            leftovers = s.recv(1)
        except OSError:
            leftovers = b""
        assert leftovers == b""
        s.close()

    def test_unreachable_target_closes_client_connection(self):
        with socket.socket() as probe:
            probe.bind(("127.0.0.1", 0))
            dead_port = probe.getsockname()[1]
        with DelayProxy("127.0.0.1", dead_port) as proxy:
            s = socket.create_connection(("127.0.0.1", proxy.port))
            s.settimeout(5.0)
            assert s.recv(1) == b""
            s.close()

    def test_rejects_negative_delay(self):
        with pytest.raises(ValueError):
            DelayProxy("127.0.0.1", 1, one_way_delay_ms=-1)


class TestMeasureMqtt:
    def test_direct_loopback_fast_and_complete(self):
        with EmbeddedBroker() as broker:
            result = measure_mqtt(20, "127.0.0.1", broker.port, warmup=2)
        assert len(result.samples) == 20
        assert result.failures == 0
        assert [s.seq for s in result.samples] == list(range(20))
        assert all(s.latency_ms < 100 for s in result.samples)

    def test_through_delay_proxy_pays_one_round_trip(self):
        with EmbeddedBroker() as broker:
            with DelayProxy("127.0.0.1", broker.port, one_way_delay_ms=50.0,
                            emulate_handshake=True) as proxy:
                result = measure_mqtt(10, "127.0.0.1", proxy.port, warmup=2)
        latencies = [s.latency_ms for s in result.samples]
        assert result.failures == 0
        assert abs(statistics.median(latencies) - 100.0) <= 10.0
        assert abs(sum(latencies) / len(latencies) - 100.0) <= 10.0

    def test_qos0_measures_write_only(self):
        with EmbeddedBroker() as broker:
            result = measure_mqtt(10, "127.0.0.1", broker.port, qos=0, warmup=2)
        assert len(result.samples) == 10
        assert all(s.latency_ms < 50 for s in result.samples)

    def test_n_zero_rejected(self):
        with pytest.raises(ValueError):
            measure_mqtt(0, "127.0.0.1", 1883)

    def test_no_broker_raises(self):
        with socket.socket() as probe:
            probe.bind(("127.0.0.1", 0))
            dead_port = probe.getsockname()[1]
        with pytest.raises(OSError):
            measure_mqtt(1, "127.0.0.1", dead_port)


class TestMeasureHttp:
    def test_direct_loopback_counts_and_sink_sees_posts(self):
        sink = IngestSink().start()
        try:
            result = measure_http(20, sink.url, warmup=3)
        finally:
            sink.stop()
        assert len(result.samples) == 20
        assert result.failures == 0
        assert sink.received == 23

    def test_per_request_pays_handshake_and_exchange(self):
        sink = IngestSink().start()
        try:
            with DelayProxy("127.0.0.1", sink.port, one_way_delay_ms=50.0,
                            emulate_handshake=True) as proxy:
                result = measure_http(
                    10, f"http://127.0.0.1:{proxy.port}/ingest/fix",
                    mode="per-request", warmup=2,
                )
        finally:
            sink.stop()
        latencies = [s.latency_ms for s in result.samples]
        assert abs(statistics.median(latencies) - 200.0) <= 20.0

    def test_keep_alive_pays_one_round_trip(self):
        sink = IngestSink().start()
        try:
            with DelayProxy("127.0.0.1", sink.port, one_way_delay_ms=50.0,
                            emulate_handshake=True) as proxy:
                result = measure_http(
                    10, f"http://127.0.0.1:{proxy.port}/ingest/fix",
                    mode="keep-alive", warmup=2,
                )
        finally:
            sink.stop()
        latencies = [s.latency_ms for s in result.samples]
        assert abs(statistics.median(latencies) - 100.0) <= 10.0

    def test_unreachable_endpoint_raises(self):
        with socket.socket() as probe:
            probe.bind(("127.0.0.1", 0))
            dead_port = probe.getsockname()[1]
        with pytest.raises(OSError):
            measure_http(1, f"http://127.0.0.1:{dead_port}/ingest/fix")
        with pytest.raises(OSError):
            measure_http(1, f"http://127.0.0.1:{dead_port}/ingest/fix", mode="keep-alive")

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            measure_http(0, "http://127.0.0.1:1/x")
        with pytest.raises(ValueError):
            measure_http(1, "ftp://127.0.0.1:1/x")
        with pytest.raises(ValueError):
            measure_http(1, "http://127.0.0.1:1/x", mode="pipelined")


class TestComparison:
    def test_self_contained_ratio_reflects_connection_cost(self):
        report = run_comparison(6, one_way_delay_ms=30.0, warmup=2)
        assert report.n == {"mqtt": 6, "http": 6}
        assert report.failures == {"mqtt": 0, "http": 0}
        assert 1.5 <= report.ratio <= 2.5
        assert len(report.samples) == 12
        assert report.mqtt_qos == 1
        assert report.http_mode == "per-request"


class TestCli:
    def test_self_contained_run_writes_report(self, tmp_path, capsys):
        out = str(tmp_path / "report.json")
        rc = bench_main(["run", "--n", "4", "--delay-ms", "20", "--warmup", "1",
                         "--out", out])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "ratio http/mqtt" in printed
        doc = json.loads(open(out).read())
        assert doc["n"] == {"mqtt": 4, "http": 4}
        assert len(doc["samples"]) == 8
        assert doc["ratio"] is not None

    def test_single_transport_filter(self, tmp_path):
        out = str(tmp_path / "m.json")
        rc = bench_main(["run", "--transport", "mqtt", "--n", "3", "--delay-ms", "10",
                         "--warmup", "1", "--out", out])
        assert rc == 0
        doc = json.loads(open(out).read())
        assert doc["n"] == {"mqtt": 3}
        assert doc["ratio"] is None

    def test_external_broker(self):
        with EmbeddedBroker() as broker:
            rc = bench_main(["run", "--transport", "mqtt", "--n", "3", "--warmup", "1",
                             "--broker", f"127.0.0.1:{broker.port}"])
        assert rc == 0

    def test_missing_external_endpoint_is_usage_error(self):
        rc = bench_main(["run", "--transport", "mqtt",
                         "--http-url", "http://127.0.0.1:1/x"])
        assert rc == 2

    def test_bad_n_is_usage_error(self):
        assert bench_main(["run", "--n", "0"]) == 2

    def test_unreachable_external_broker_fails(self):
        with socket.socket() as probe:
            probe.bind(("127.0.0.1", 0))
            dead_port = probe.getsockname()[1]
        rc = bench_main(["run", "--transport", "mqtt", "--broker",
                         f"127.0.0.1:{dead_port}", "--n", "1"])
        assert rc == 1
