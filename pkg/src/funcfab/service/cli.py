"""Coordinator command line: ``funcfab-coordinator serve --config <file>``."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading

from funcfab.service.config import CoordinatorConfig
from funcfab.service.coordinator import Coordinator
from funcfab.service.http_api import ApiServer


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="funcfab-coordinator")
    sub = parser.add_subparsers(dest="command", required=True)
    serve = sub.add_parser("serve", help="run the coordinator service")
    serve.add_argument("--config", required=True, help="YAML config file")
    serve.add_argument(
        "--port-file",
        default=None,
        help="write the bound HTTP host:port to this file once ready",
    )
    serve.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )

    cfg = CoordinatorConfig.from_file(args.config)
    coordinator = Coordinator(cfg)
    coordinator.start()
    server = ApiServer(coordinator, cfg.host, cfg.port)
    server.start()
    host, port = server.address
    if args.port_file:
        with open(args.port_file, "w", encoding="utf-8") as fp:
            fp.write("%s %d\n" % (host, port))
    print("READY %s %d" % (host, port), flush=True)

    stop = threading.Event()

    def _on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, _on_signal)
    signal.signal(signal.SIGINT, _on_signal)
    stop.wait()
    server.stop()
    coordinator.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
