"""Latency benchmark: MQTT publish/ack vs HTTP POST for position fixes."""

from atms.bench.proxy import DelayProxy
from atms.bench.report import (
    BenchReport,
    LatencySample,
    Transport,
    load_report,
    percentile,
    report_to_dict,
    save_report,
    summarize,
)
from atms.bench.runners import (
    IngestSink,
    MeasureResult,
    measure_http,
    measure_mqtt,
    run_comparison,
)

__all__ = [
    "BenchReport",
    "DelayProxy",
    "IngestSink",
    "LatencySample",
    "MeasureResult",
    "Transport",
    "load_report",
    "measure_http",
    "measure_mqtt",
    "percentile",
    "report_to_dict",
    "run_comparison",
    "save_report",
    "summarize",
]
