"""Benchmark sample and report types.

A report's mean latencies are plain sums over the retained samples
divided by their count, so anyone holding the raw samples (always kept
in the report) can recompute every figure bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping


class Transport(str, Enum):
    MQTT = "mqtt"
    HTTP = "http"


@dataclass(frozen=True)
class LatencySample:
    transport: Transport
    seq: int
    latency_ms: float

    def __post_init__(self) -> None:
        if not isinstance(self.transport, Transport):
            raise ValueError(f"bad transport: {self.transport!r}")
        if not (math.isfinite(self.latency_ms) and self.latency_ms >= 0):
            raise ValueError(f"latency_ms must be finite and >= 0, got {self.latency_ms!r}")


def percentile(values: Iterable[float], q: float) -> float:
    """Nearest-rank percentile; q in (0, 100]."""
    ordered = sorted(values)
    if not ordered:
        raise ValueError("percentile of empty sample set")
    if not 0 < q <= 100:
        raise ValueError(f"q must be in (0, 100], got {q!r}")
    rank = max(1, math.ceil(q / 100 * len(ordered)))
    return ordered[rank - 1]


@dataclass(frozen=True)
class BenchReport:
    """Summary plus the raw samples it was computed from.

    Per-transport figures live in maps keyed by transport name, since a
    run may cover one transport or both. ``ratio`` is mean HTTP latency
    over mean MQTT latency, present only when both sides ran.
    """

    n: dict[str, int]
    phi_m_ms: float | None
    phi_h_ms: float | None
    p50_ms: dict[str, float]
    p95_ms: dict[str, float]
    ratio: float | None
    failures: dict[str, int]
    samples: tuple[LatencySample, ...]
    mqtt_qos: int | None = None
    http_mode: str | None = None
    meta: dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.n:
            raise ValueError("report needs at least one transport")
        for name, count in self.n.items():
            if count < 1:
                raise ValueError(f"transport {name} has no samples")
        if self.ratio is not None and (self.phi_m_ms is None or self.phi_h_ms is None):
            raise ValueError("ratio requires both transports")


def summarize(
    samples: Iterable[LatencySample],
    *,
    failures: Mapping[str, int] | None = None,
    mqtt_qos: int | None = None,
    http_mode: str | None = None,
    meta: Mapping[str, object] | None = None,
) -> BenchReport:
    samples = tuple(samples)
    if not samples:
        raise ValueError("summarize needs at least one sample")
    latencies = {t: [s.latency_ms for s in samples if s.transport is t] for t in Transport}
    n = {t.value: len(v) for t, v in latencies.items() if v}
    means = {t: sum(v) / len(v) for t, v in latencies.items() if v}
    phi_m = means.get(Transport.MQTT)
    phi_h = means.get(Transport.HTTP)
    ratio = phi_h / phi_m if (phi_m and phi_h is not None) else None
    return BenchReport(
        n=n,
        phi_m_ms=phi_m,
        phi_h_ms=phi_h,
        p50_ms={t.value: percentile(v, 50) for t, v in latencies.items() if v},
        p95_ms={t.value: percentile(v, 95) for t, v in latencies.items() if v},
        ratio=ratio,
        failures=dict(failures or {t: 0 for t in n}),
        samples=samples,
        mqtt_qos=mqtt_qos,
        http_mode=http_mode,
        meta=dict(meta or {}),
    )


def report_to_dict(report: BenchReport) -> dict:
    return {
        "n": dict(report.n),
        "phi_m_ms": report.phi_m_ms,
        "phi_h_ms": report.phi_h_ms,
        "ratio": report.ratio,
        "p50": dict(report.p50_ms),
        "p95": dict(report.p95_ms),
        "failures": dict(report.failures),
        "mqtt_qos": report.mqtt_qos,
        "http_mode": report.http_mode,
        "meta": dict(report.meta),
        "samples": [
            {"transport": s.transport.value, "seq": s.seq, "latency_ms": s.latency_ms}
            for s in report.samples
        ],
    }


def report_from_dict(doc: Mapping) -> BenchReport:
    try:
        samples = tuple(
            LatencySample(Transport(s["transport"]), int(s["seq"]), float(s["latency_ms"]))
            for s in doc["samples"]
        )
        return BenchReport(
            n={str(k): int(v) for k, v in doc["n"].items()},
            phi_m_ms=None if doc.get("phi_m_ms") is None else float(doc["phi_m_ms"]),
            phi_h_ms=None if doc.get("phi_h_ms") is None else float(doc["phi_h_ms"]),
            p50_ms={str(k): float(v) for k, v in doc["p50"].items()},
            p95_ms={str(k): float(v) for k, v in doc["p95"].items()},
            ratio=None if doc.get("ratio") is None else float(doc["ratio"]),
            failures={str(k): int(v) for k, v in doc["failures"].items()},
            samples=samples,
            mqtt_qos=doc.get("mqtt_qos"),
            http_mode=doc.get("http_mode"),
            meta=dict(doc.get("meta") or {}),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"bad report document: {e}") from e


def save_report(report: BenchReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report_to_dict(report), f, indent=2)
        f.write("\n")


def load_report(path: str) -> BenchReport:
    with open(path, "r", encoding="utf-8") as f:
        return report_from_dict(json.load(f))
