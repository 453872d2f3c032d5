"""Command line front end for the gateway.

    atms serve --broker 127.0.0.1:1883 --port 8080 --ledger ledger.jsonl
    atms serve --scenario demo.json   # fare routes from a scenario file

Environment overrides: ATMS_BROKER (host:port), ATMS_PORT.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from atms.gateway.app import GatewayConfig, create_app
from atms.sim.scenario import ScenarioError, scenario_from_dict


def _parse_hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atms", description="Bus-to-web gateway")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the REST/WebSocket gateway")
    serve.add_argument("--broker", type=_parse_hostport,
                       default=os.environ.get("ATMS_BROKER", "127.0.0.1:1883"),
                       help="broker host:port (default 127.0.0.1:1883, env ATMS_BROKER)")
    serve.add_argument("--host", default="127.0.0.1", help="bind address (default 127.0.0.1)")
    serve.add_argument("--port", type=int,
                       default=int(os.environ.get("ATMS_PORT", "8080")),
                       help="HTTP port (default 8080, env ATMS_PORT)")
    serve.add_argument("--ledger", default=None,
                       help="ticketing ledger file, replayed at startup and appended to")
    serve.add_argument("--scenario", default=None,
                       help="scenario JSON whose routes drive fare distances")
    serve.add_argument("--staleness-ms", type=int, default=15_000,
                       help="fix age after which a train shows stale (default 15000)")
    serve.add_argument("--static-dir", default=None,
                       help="serve this directory at / (e.g. the built dashboard)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if args.command != "serve":  # pragma: no cover - argparse enforces
        return 2

    broker = args.broker if isinstance(args.broker, tuple) else _parse_hostport(args.broker)
    routes: tuple = ()
    if args.scenario:
        try:
            with open(args.scenario, "r", encoding="utf-8") as f:
                routes = scenario_from_dict(json.load(f)).routes
        except (OSError, ValueError, ScenarioError) as e:
            print(f"atms: cannot load scenario: {e}", file=sys.stderr)
            return 2

    config = GatewayConfig(
        broker_host=broker[0],
        broker_port=broker[1],
        host=args.host,
        port=args.port,
        ledger_path=args.ledger,
        routes=routes,
        staleness_ms=args.staleness_ms,
        static_dir=args.static_dir,
    )
    # fail fast with a readable message instead of a lifespan stack trace
    import socket

    try:
        probe = socket.create_connection((config.broker_host, config.broker_port), timeout=5.0)
        probe.close()
    except OSError as e:
        print(f"atms: broker {config.broker_host}:{config.broker_port} unreachable: {e}",
              file=sys.stderr)
        return 1
    try:
        app = create_app(config)
    except (OSError, ValueError) as e:
        print(f"atms: {e}", file=sys.stderr)
        return 1

    import uvicorn

    try:
        uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
    except KeyboardInterrupt:  # pragma: no cover - interactive only
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
