"""Command line front end for the latency benchmark.

    bench run --transport both --n 100 --delay-ms 50 --out report.json
    bench run --transport mqtt --broker 127.0.0.1:1883 --n 200
    bench run --transport http --http-url http://127.0.0.1:8000/ingest/fix
"""

from __future__ import annotations

import argparse
import logging
import sys

from atms.bench.report import save_report, summarize
from atms.bench.runners import measure_http, measure_mqtt, run_comparison


def _parse_hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="MQTT vs HTTP publish latency")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="measure publish latency")
    run.add_argument("--transport", choices=("mqtt", "http", "both"), default="both")
    run.add_argument("--n", type=int, default=100, help="samples per transport (default 100)")
    run.add_argument("--qos", type=int, choices=(0, 1), default=1, help="MQTT QoS (default 1)")
    run.add_argument("--http-mode", choices=("per-request", "keep-alive"), default="per-request")
    run.add_argument("--warmup", type=int, default=5, help="discarded warm-up publishes (default 5)")
    run.add_argument("--delay-ms", type=float, default=50.0,
                     help="injected one-way delay for self-contained runs (default 50)")
    run.add_argument("--jitter-ms", type=float, default=0.0)
    run.add_argument("--broker", type=_parse_hostport, default=None,
                     help="measure against this broker instead of a self-contained setup")
    run.add_argument("--http-url", default=None,
                     help="measure against this URL instead of a self-contained setup")
    run.add_argument("--out", default=None, help="write the JSON report here")
    return p


def _print_report(report) -> None:
    for name in sorted(report.n):
        mean = report.phi_m_ms if name == "mqtt" else report.phi_h_ms
        print(
            f"{name:5s} n={report.n[name]:4d} mean={mean:8.2f} ms "
            f"p50={report.p50_ms[name]:8.2f} p95={report.p95_ms[name]:8.2f} "
            f"failures={report.failures.get(name, 0)}"
        )
    if report.ratio is not None:
        print(f"ratio http/mqtt = {report.ratio:.2f}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if args.n < 1:
        print("bench: --n must be >= 1", file=sys.stderr)
        return 2

    external = args.broker is not None or args.http_url is not None
    try:
        if not external:
            report = run_comparison(
                args.n,
                one_way_delay_ms=args.delay_ms,
                jitter_ms=args.jitter_ms,
                qos=args.qos,
                http_mode=args.http_mode,
                warmup=args.warmup,
            )
            if args.transport != "both":
                keep = args.transport
                report = summarize(
                    [s for s in report.samples if s.transport.value == keep],
                    failures={keep: report.failures.get(keep, 0)},
                    mqtt_qos=args.qos if keep == "mqtt" else None,
                    http_mode=args.http_mode if keep == "http" else None,
                    meta=report.meta,
                )
        else:
            samples = []
            failures = {}
            if args.transport in ("mqtt", "both"):
                if args.broker is None:
                    print("bench: --transport mqtt needs --broker", file=sys.stderr)
                    return 2
                res = measure_mqtt(args.n, args.broker[0], args.broker[1],
                                   qos=args.qos, warmup=args.warmup)
                samples.extend(res.samples)
                failures["mqtt"] = res.failures
            if args.transport in ("http", "both"):
                if args.http_url is None:
                    print("bench: --transport http needs --http-url", file=sys.stderr)
                    return 2
                res = measure_http(args.n, args.http_url, mode=args.http_mode,
                                   warmup=args.warmup)
                samples.extend(res.samples)
                failures["http"] = res.failures
            report = summarize(samples, failures=failures,
                               mqtt_qos=args.qos if "mqtt" in failures else None,
                               http_mode=args.http_mode if "http" in failures else None)
    except (ConnectionError, OSError) as e:
        print(f"bench: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"bench: {e}", file=sys.stderr)
        return 2

    _print_report(report)
    if args.out:
        save_report(report, args.out)
        print(f"report written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
