"""Manager command line, as emitted by providers:

    funcfab-manager --agent <host:port> --node-id <id> --workers <n> \
        --tags <t1,t2> --config <file>
"""

from __future__ import annotations

import argparse
import logging
import sys

import yaml

from funcfab.node.manager import Manager, ManagerConfig


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="funcfab-manager")
    parser.add_argument("--agent", required=True, help="agent address host:port")
    parser.add_argument("--node-id", required=True)
    parser.add_argument("--workers", type=int, required=True, help="worker slots")
    parser.add_argument("--tags", default="", help="comma-separated default tags")
    parser.add_argument("--config", default=None, help="manager YAML config")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s manager %(levelname)s %(message)s",
        stream=sys.stderr,
    )

    data = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fp:
            data = yaml.safe_load(fp) or {}
    host, _, port = args.agent.rpartition(":")
    tags = [t for t in args.tags.split(",") if t]
    cfg = ManagerConfig.from_dict(
        data, host or "127.0.0.1", int(port), args.node_id, args.workers, tags
    )
    manager = Manager(cfg)
    try:
        manager.start()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
