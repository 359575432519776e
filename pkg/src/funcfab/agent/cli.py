"""Agent command line: ``funcfab-agent start|stop --config <file>``."""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys

from funcfab.agent.agent import Agent
from funcfab.agent.config import AgentConfig


def _pidfile(cfg: AgentConfig) -> str:
    return os.path.join(cfg.workdir, "agent.pid")


def _start(cfg: AgentConfig, verbose: bool) -> int:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s agent %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    os.makedirs(cfg.workdir, exist_ok=True)
    with open(_pidfile(cfg), "w", encoding="utf-8") as fp:
        fp.write(str(os.getpid()))
    agent = Agent(cfg)

    def _on_signal(signum, frame):
        agent.stop()

    signal.signal(signal.SIGTERM, _on_signal)
    signal.signal(signal.SIGINT, _on_signal)
    try:
        return agent.run()
    finally:
        try:
            os.unlink(_pidfile(cfg))
        except OSError:
            pass


def _stop(cfg: AgentConfig) -> int:
    path = _pidfile(cfg)
    try:
        with open(path, "r", encoding="utf-8") as fp:
            pid = int(fp.read().strip())
    except (OSError, ValueError):
        print("no running agent found for this config", file=sys.stderr)
        return 1
    try:
        os.kill(pid, signal.SIGTERM)
    except ProcessLookupError:
        print("stale pidfile; agent not running", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="funcfab-agent")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("start", "stop"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="agent YAML config")
        cmd.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    cfg = AgentConfig.from_file(args.config)
    if args.command == "start":
        return _start(cfg, args.verbose)
    return _stop(cfg)


if __name__ == "__main__":
    sys.exit(main())
