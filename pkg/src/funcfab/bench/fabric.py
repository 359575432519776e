"""Process-level fabric control for experiments.

Spawns the coordinator and endpoint agents as real OS processes, waits for
readiness, and injects faults by killing them hard (SIGKILL). Every spawned
top-level process gets its own session so teardown can reap whole trees with
one killpg, while targeted kills leave children (managers, workers) running
as orphans, exactly like a production crash would.
"""

from __future__ import annotations

import logging
import os
import signal
import subprocess
import sys
import time
from typing import Dict, List, Optional

import psutil
import yaml

from funcfab.client.http import FabricClient

log = logging.getLogger(__name__)

BENCH_TOKEN = "bench-token"
BENCH_PRINCIPAL = "bench"


class FabricError(Exception):
    pass


def _spawn(argv, log_path: str) -> subprocess.Popen:
    logfile = open(log_path, "ab")
    return subprocess.Popen(
        argv,
        stdin=subprocess.DEVNULL,
        stdout=logfile,
        stderr=logfile,
        start_new_session=True,
    )


class EndpointHandle:
    def __init__(self, name: str, config_path: str, workdir: str):
        self.name = name
        self.config_path = config_path
        self.workdir = workdir
        self.endpoint_id: Optional[str] = None
        self.proc: Optional[subprocess.Popen] = None
        self.manager_port: Optional[int] = None
        self.config: dict = {}
        self.extra_procs: List[subprocess.Popen] = []

    @property
    def metrics_path(self) -> str:
        return os.path.join(self.workdir, "metrics.jsonl")


class FabricController:
    def __init__(self, out_dir: str, seed: Optional[int] = None,
                 coordinator_overrides: Optional[dict] = None):
        self.out_dir = out_dir
        self.seed = seed
        os.makedirs(out_dir, exist_ok=True)
        self.coordinator_proc: Optional[subprocess.Popen] = None
        self.base_url: Optional[str] = None
        self.endpoints: Dict[str, EndpointHandle] = {}
        self._coordinator_overrides = coordinator_overrides or {}
        self._port_file = os.path.join(out_dir, "coordinator.port")

    # ------------------------------------------------------------------

    def start_coordinator(self) -> str:
        cfg = {
            "listen": {"host": "127.0.0.1", "port": 0},
            "db_path": os.path.join(self.out_dir, "coordinator.db"),
            "tokens": {BENCH_TOKEN: BENCH_PRINCIPAL},
            "purge": {"grace_s": 3600, "interval_s": 60},
            "heartbeat": {"interval": 0.25, "miss_threshold": 4},
        }
        cfg.update(self._coordinator_overrides)
        path = os.path.join(self.out_dir, "coordinator.yaml")
        with open(path, "w", encoding="utf-8") as fp:
            yaml.safe_dump(cfg, fp)
        if os.path.exists(self._port_file):
            os.unlink(self._port_file)
        self.coordinator_proc = _spawn(
            [
                sys.executable,
                "-m",
                "funcfab.service.cli",
                "serve",
                "--config",
                path,
                "--port-file",
                self._port_file,
            ],
            os.path.join(self.out_dir, "coordinator.log"),
        )
        deadline = time.time() + 20
        while time.time() < deadline:
            if os.path.exists(self._port_file):
                with open(self._port_file, "r", encoding="utf-8") as fp:
                    content = fp.read().split()
                if len(content) == 2:
                    self.base_url = "http://%s:%s" % (content[0], content[1])
                    return self.base_url
            if self.coordinator_proc.poll() is not None:
                raise FabricError("coordinator exited during startup")
            time.sleep(0.05)
        raise FabricError("coordinator never became ready")

    def restart_coordinator(self):
        """Hard-kill the coordinator and boot a fresh one on the same store."""
        if self.coordinator_proc is not None:
            self._kill_tree(self.coordinator_proc)
        return self.start_coordinator()

    def client(self, poll_interval: float = 0.02) -> FabricClient:
        return FabricClient(self.base_url, BENCH_TOKEN, poll_interval=poll_interval)

    # ------------------------------------------------------------------

    def add_endpoint(
        self,
        name: str,
        nodes: int = 1,
        workers_per_node: int = 8,
        default_tags: Optional[List[str]] = None,
        tags: Optional[dict] = None,
        prefetch_count: Optional[int] = None,
        executor_batching: bool = True,
        advert_min_interval_s: float = 0.0,
        heartbeat_interval: float = 0.25,
        miss_threshold: int = 4,
        warm_ttl_s: float = 300.0,
        idle_timeout_s: float = 30.0,
        scaler_interval_s: float = 0.25,
        provider: Optional[dict] = None,
        min_blocks: Optional[int] = None,
        max_blocks: Optional[int] = None,
        wait_connected: bool = True,
        wait_workers: bool = True,
    ) -> EndpointHandle:
        workdir = os.path.join(self.out_dir, "ep-" + name)
        os.makedirs(workdir, exist_ok=True)
        manager_port = _free_port()
        provider_cfg = dict(provider or {"type": "local"})
        provider_cfg.setdefault("nodes_per_block", 1)
        provider_cfg.setdefault(
            "min_blocks", nodes if min_blocks is None else min_blocks
        )
        provider_cfg.setdefault(
            "max_blocks", nodes if max_blocks is None else max_blocks
        )
        cfg = {
            "coordinator_url": self.base_url,
            "token": BENCH_TOKEN,
            "endpoint_name": name,
            "workdir": workdir,
            "manager_listen": {"host": "127.0.0.1", "port": manager_port},
            "provider": provider_cfg,
            "workers_per_node": workers_per_node,
            "default_tags": ["default"] if default_tags is None else default_tags,
            "tags": tags or {"default": {}},
            "executor_batching": executor_batching,
            "advert_min_interval_s": advert_min_interval_s,
            "heartbeat": {"interval": heartbeat_interval, "miss_threshold": miss_threshold},
            "warm_ttl_s": warm_ttl_s,
            "idle_timeout_s": idle_timeout_s,
            "scaler_interval_s": scaler_interval_s,
            "reconnect": {"base_s": 0.25, "cap_s": 2.0},
        }
        if prefetch_count is not None:
            cfg["prefetch_count"] = prefetch_count
        if self.seed is not None:
            cfg["rng_seed"] = self.seed
        config_path = os.path.join(workdir, "agent.yaml")
        with open(config_path, "w", encoding="utf-8") as fp:
            yaml.safe_dump(cfg, fp)
        handle = EndpointHandle(name, config_path, workdir)
        handle.manager_port = manager_port
        handle.config = cfg
        self.endpoints[name] = handle
        self._spawn_agent(handle)
        if wait_connected:
            self.wait_endpoint_connected(handle)
            if wait_workers:
                expected = provider_cfg["min_blocks"] * provider_cfg["nodes_per_block"]
                if expected and (cfg["default_tags"]):
                    self.wait_workers(handle, expected * workers_per_node)
        return handle

    def _spawn_agent(self, handle: EndpointHandle):
        handle.proc = _spawn(
            [
                sys.executable,
                "-m",
                "funcfab.agent.cli",
                "start",
                "--config",
                handle.config_path,
            ],
            os.path.join(handle.workdir, "agent.log"),
        )

    def wait_endpoint_connected(self, handle: EndpointHandle, timeout: float = 30.0):
        client = self.client()
        deadline = time.time() + timeout
        id_path = os.path.join(handle.workdir, "endpoint_id")
        while time.time() < deadline:
            if handle.endpoint_id is None and os.path.exists(id_path):
                with open(id_path, "r", encoding="utf-8") as fp:
                    handle.endpoint_id = fp.read().strip() or None
            if handle.endpoint_id:
                try:
                    info = client.endpoint_info(handle.endpoint_id)
                    if info.get("state") == "CONNECTED":
                        return info
                except Exception:
                    pass
            if handle.proc is not None and handle.proc.poll() is not None:
                raise FabricError(
                    "agent %s exited with %d" % (handle.name, handle.proc.returncode)
                )
            time.sleep(0.05)
        raise FabricError("endpoint %s never connected" % handle.name)

    def wait_workers(self, handle: EndpointHandle, count: int, timeout: float = 60.0):
        """Wait until the endpoint's deployed worker pool reaches ``count``."""
        deadline = time.time() + timeout
        while time.time() < deadline:
            line = self.latest_metrics(handle)
            if line:
                total = sum(
                    entry.get("deployed", 0)
                    for entry in line.get("workers", {}).values()
                )
                if total >= count:
                    return
            time.sleep(0.1)
        raise FabricError("endpoint %s never warmed %d workers" % (handle.name, count))

    def latest_metrics(self, handle: EndpointHandle) -> Optional[dict]:
        lines = self.metrics_lines(handle)
        return lines[-1] if lines else None

    def metrics_lines(self, handle: EndpointHandle) -> List[dict]:
        import json

        if not os.path.exists(handle.metrics_path):
            return []
        out = []
        with open(handle.metrics_path, "r", encoding="utf-8") as fp:
            for line in fp:
                line = line.strip()
                if not line:
                    continue
                try:
                    out.append(json.loads(line))
                except ValueError:
                    continue
        return out

    # ------------------------------------------------------------------
    # faults

    def manager_pids(self, handle: EndpointHandle) -> List[int]:
        """Live manager processes under this endpoint's agent."""
        pids = []
        procs = []
        if handle.proc is not None and handle.proc.poll() is None:
            try:
                procs = psutil.Process(handle.proc.pid).children(recursive=False)
            except psutil.NoSuchProcess:
                procs = []
        for proc in procs:
            try:
                cmdline = " ".join(proc.cmdline())
            except psutil.Error:
                continue
            if "funcfab.node.cli" in cmdline:
                pids.append(proc.pid)
        for proc in handle.extra_procs:
            if proc.poll() is None:
                pids.append(proc.pid)
        return pids

    def kill_manager(self, handle: EndpointHandle) -> int:
        pids = self.manager_pids(handle)
        if not pids:
            raise FabricError("no manager process to kill")
        pid = pids[0]
        os.kill(pid, signal.SIGKILL)
        log.info("killed manager pid %d", pid)
        return pid

    def restart_manager(self, handle: EndpointHandle) -> subprocess.Popen:
        """Spawn a replacement manager attached to the agent's manager port."""
        cfg = handle.config
        argv = [
            sys.executable,
            "-m",
            "funcfab.node.cli",
            "--agent",
            "127.0.0.1:%d" % handle.manager_port,
            "--node-id",
            "harness-restart-%d" % int(time.time() * 1000),
            "--workers",
            str(cfg["workers_per_node"]),
            "--tags",
            ",".join(cfg["default_tags"]),
            "--config",
            os.path.join(handle.workdir, "manager.yaml"),
        ]
        proc = _spawn(argv, os.path.join(handle.workdir, "manager-restart.log"))
        handle.extra_procs.append(proc)
        return proc

    def kill_agent(self, handle: EndpointHandle) -> int:
        if handle.proc is None or handle.proc.poll() is not None:
            raise FabricError("agent is not running")
        pid = handle.proc.pid
        os.kill(pid, signal.SIGKILL)  # children survive as orphans
        handle.proc.wait(timeout=10)
        log.info("killed agent pid %d", pid)
        return pid

    def restart_agent(self, handle: EndpointHandle):
        self._spawn_agent(handle)
        self.wait_endpoint_connected(handle)

    # ------------------------------------------------------------------

    def _kill_tree(self, proc: subprocess.Popen):
        try:
            os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
        except (ProcessLookupError, PermissionError, OSError):
            try:
                proc.kill()
            except OSError:
                pass
        try:
            proc.wait(timeout=10)
        except Exception:
            pass

    def stop(self):
        for handle in self.endpoints.values():
            for proc in handle.extra_procs:
                self._kill_tree(proc)
            if handle.proc is not None:
                self._kill_tree(handle.proc)
        if self.coordinator_proc is not None:
            self._kill_tree(self.coordinator_proc)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def _free_port() -> int:
    import socket

    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]
