"""Command line front end for the simulator.

    sim run --scenario demo.json --broker 127.0.0.1:1883 --duration-ms 60000
    sim run --scenario demo.json --dry-run --duration-ms 5000
    sim validate --scenario demo.json
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

from atms.sim.engine import BusPublisher, Simulator
from atms.sim.scenario import ScenarioError, load_scenario


def _parse_hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sim", description="Train telemetry simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="replay a scenario onto the bus")
    run.add_argument("--scenario", required=True, help="scenario JSON file")
    run.add_argument("--broker", type=_parse_hostport, default=("127.0.0.1", 1883),
                     help="broker host:port (default 127.0.0.1:1883)")
    run.add_argument("--duration-ms", type=int, default=60_000,
                     help="simulated duration to cover (default 60000)")
    run.add_argument("--realtime", action="store_true",
                     help="pace fixes by the wall clock instead of replaying instantly")
    run.add_argument("--speedup", type=float, default=1.0,
                     help="wall clock speed multiplier in --realtime mode")
    run.add_argument("--epoch-ms", default="0",
                     help="offset added to payload timestamps; integer or 'now'")
    run.add_argument("--dry-run", action="store_true",
                     help="print topic and payload lines instead of publishing")

    val = sub.add_parser("validate", help="parse a scenario and print a summary")
    val.add_argument("--scenario", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        scenario = load_scenario(args.scenario)
    except (OSError, ScenarioError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    if args.command == "validate":
        total_fixes = sum(
            max(0, (60_000 - t.start_time_ms + t.fix_interval_ms - 1) // t.fix_interval_ms)
            for t in scenario.trains
        )
        print(f"routes: {len(scenario.routes)}")
        print(f"trains: {len(scenario.trains)}")
        print(f"noise sigma_m: {scenario.noise.sigma_m}")
        print(f"seed: {scenario.seed}")
        print(f"fixes in first minute: {total_fixes}")
        return 0

    epoch_ms = int(time.time() * 1000) if args.epoch_ms == "now" else int(args.epoch_ms)

    if args.dry_run:
        def publish(topic: str, payload: bytes) -> None:
            print(f"{topic} {payload.decode('ascii')}")
        bus = None
    else:
        host, port = args.broker
        bus = BusPublisher(host, port)
        publish = bus.publish

    sim = Simulator(scenario, publish, epoch_ms=epoch_ms)
    try:
        if args.realtime:
            n = sim.run_realtime(args.duration_ms, speedup=args.speedup)
        else:
            n = sim.run_for(args.duration_ms)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    finally:
        if bus is not None:
            bus.close()
    logging.getLogger(__name__).info("published %d fixes", n)
    if bus is not None and bus.dropped:
        logging.getLogger(__name__).warning("dropped %d fixes while broker was unreachable", bus.dropped)
    return 0


if __name__ == "__main__":
    sys.exit(main())
