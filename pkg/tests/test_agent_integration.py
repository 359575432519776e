"""Live fabric: coordinator + agent + real managers and workers."""

import threading
import time

import pytest

from funcfab.agent.agent import Agent
from funcfab.agent.config import AgentConfig, TagPolicy
from funcfab.client.http import FabricClient
from funcfab.core.envelope import CODEC_RAW, Envelope
from funcfab.wire.heartbeat import HeartbeatConfig

from conftest import register_bench_function


def agent_config(tmp_path, base_url, **overrides):
    cfg = AgentConfig(
        coordinator_url=base_url,
        token="agent-token",
        workdir=str(tmp_path / "agent"),
        endpoint_name="test-endpoint",
        provider={"type": "local", "nodes_per_block": 1, "min_blocks": 1, "max_blocks": 3},
        workers_per_node=4,
        default_tags=["default"],
        tags={"default": TagPolicy()},
        heartbeat=HeartbeatConfig(interval=0.15, miss_threshold=3),
        scaler_interval_s=0.2,
        idle_timeout_s=30.0,
        reconnect_base_s=0.2,
        reconnect_cap_s=1.0,
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


@pytest.fixture
def fabric(coordinator, tmp_path):
    agents = []

    def start(**overrides):
        cfg = agent_config(tmp_path, coordinator.base_url, **overrides)
        agent = Agent(cfg)
        thread = threading.Thread(target=agent.run, daemon=True)
        thread.start()
        agents.append((agent, thread))
        return agent

    yield start
    for agent, thread in agents:
        agent.stop()
    for agent, thread in agents:
        thread.join(timeout=10)
        for block in agent.provider.blocks.values():
            for proc in block.procs:
                try:
                    proc.kill()
                except OSError:
                    pass


def wait_connected(client, endpoint_id, timeout=15.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        info = client.endpoint_info(endpoint_id)
        if info.get("state") == "CONNECTED":
            return info
        time.sleep(0.05)
    raise AssertionError("endpoint never connected")


def wait_agent_endpoint(agent, timeout=15.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        if agent.endpoint_id:
            return agent.endpoint_id
        time.sleep(0.05)
    raise AssertionError("agent never registered over HTTP")


def test_end_to_end_echo(coordinator, api, fabric):
    agent = fabric()
    client = FabricClient(coordinator.base_url, "alice-token")
    endpoint_id = wait_agent_endpoint(agent)
    wait_connected(client, endpoint_id)
    fid = register_bench_function(api, op="echo")
    task_id = client.submit(fid, endpoint_id, Envelope(CODEC_RAW, b"hello-world"))
    env = client.result(task_id, timeout=20)
    assert env.payload == b"hello-world"
    status = client.status(task_id)
    assert status["state"] == "SUCCEEDED"
    timing = status["timing"]
    assert timing["service_time"] > 0
    assert timing["forwarder_time"] > 0
    assert timing["endpoint_time"] > 0
    assert timing["exec_time"] > 0


def test_soak_every_task_terminal_exactly_once(coordinator, api, fabric):
    agent = fabric()
    client = FabricClient(coordinator.base_url, "alice-token")
    endpoint_id = wait_agent_endpoint(agent)
    wait_connected(client, endpoint_id)
    fid = register_bench_function(api, op="noop")
    n = 300
    task_ids = [
        client.submit(fid, endpoint_id, Envelope(CODEC_RAW, b"%d" % i)) for i in range(n)
    ]
    states = client.wait_all(task_ids, timeout=60)
    assert len(states) == n
    assert all(state == "SUCCEEDED" for state in states.values())
    rows = client.export_tasks(endpoint_id)
    assert len(rows) == n  # exactly one terminal record per submitted task
    info = client.endpoint_info(endpoint_id)
    assert info["queue_depth"] == 0
    assert info["in_flight"] == 0


def test_manager_killed_tasks_recovered(coordinator, api, fabric):
    agent = fabric()
    client = FabricClient(coordinator.base_url, "alice-token")
    endpoint_id = wait_agent_endpoint(agent)
    wait_connected(client, endpoint_id)
    fid = register_bench_function(api, op="sleep_ms", ms=400)
    task_ids = [
        client.submit(fid, endpoint_id, Envelope(CODEC_RAW, b"%d" % i)) for i in range(8)
    ]
    # wait until work is actually outstanding on the manager
    deadline = time.time() + 10
    while time.time() < deadline:
        if any(rec.outstanding for rec in agent.managers.values()):
            break
        time.sleep(0.05)
    procs = [p for b in agent.provider.blocks.values() for p in b.procs]
    assert procs
    procs[0].kill()
    states = client.wait_all(task_ids, timeout=60)
    assert all(state == "SUCCEEDED" for state in states.values())
    assert agent.metrics["manager_losses"] >= 1
    assert agent.metrics["internal_requeues"] >= 1


def test_non_retriable_lost_fails_upstream(coordinator, api, fabric):
    agent = fabric()
    client = FabricClient(coordinator.base_url, "alice-token")
    endpoint_id = wait_agent_endpoint(agent)
    wait_connected(client, endpoint_id)
    fid = register_bench_function(api, op="sleep_ms", ms=2000)
    task_id = client.submit(
        fid, endpoint_id, Envelope(CODEC_RAW, b"x"), retriable=False
    )
    deadline = time.time() + 10
    while time.time() < deadline:
        if any(rec.outstanding for rec in agent.managers.values()):
            break
        time.sleep(0.05)
    for block in agent.provider.blocks.values():
        for proc in block.procs:
            proc.kill()
    deadline = time.time() + 20
    state = None
    while time.time() < deadline:
        state = client.status(task_id)["state"]
        if state == "FAILED":
            break
        time.sleep(0.1)
    assert state == "FAILED"


def test_agent_survives_coordinator_restart(tmp_path):
    import socket as socket_mod

    from funcfab.service.config import CoordinatorConfig
    from funcfab.service.coordinator import Coordinator
    from funcfab.service.http_api import ApiServer
    from conftest import TOKENS, Api

    with socket_mod.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    db = str(tmp_path / "c.db")

    def boot():
        cfg = CoordinatorConfig(
            port=port,
            db_path=db,
            tokens=dict(TOKENS),
            heartbeat=HeartbeatConfig(interval=0.2, miss_threshold=3),
        )
        coord = Coordinator(cfg)
        coord.start()
        server = ApiServer(coord, cfg.host, cfg.port)
        server.start()
        return coord, server

    coord, server = boot()
    base = "http://127.0.0.1:%d" % port
    api = Api(base, "alice-token")
    client = FabricClient(base, "alice-token")
    agent = Agent(agent_config(tmp_path, base))
    thread = threading.Thread(target=agent.run, daemon=True)
    thread.start()
    try:
        endpoint_id = wait_agent_endpoint(agent)
        wait_connected(client, endpoint_id)
        fid = register_bench_function(api, op="echo")
        first = client.submit(fid, endpoint_id, Envelope(CODEC_RAW, b"before"))
        assert client.result(first, timeout=20).payload == b"before"

        server.stop()
        coord.stop()
        time.sleep(1.0)
        coord, server = boot()
        # fresh client: the old session's pooled keep-alive connections
        # still point at the dead server instance
        client = FabricClient(base, "alice-token")
        wait_connected(client, endpoint_id, timeout=20)
        second = client.submit(fid, endpoint_id, Envelope(CODEC_RAW, b"after"))
        assert client.result(second, timeout=20).payload == b"after"
    finally:
        agent.stop()
        thread.join(timeout=10)
        for block in agent.provider.blocks.values():
            for proc in block.procs:
                try:
                    proc.kill()
                except OSError:
                    pass
        server.stop()
        coord.stop()


def test_bad_token_exits_nonzero(coordinator, tmp_path):
    cfg = agent_config(tmp_path, coordinator.base_url, token="wrong-token")
    agent = Agent(cfg)
    assert agent.run() == 3


def test_prefetch_zero_never_exceeds_idle(coordinator, api, fabric):
    agent = fabric(prefetch_count=0)
    client = FabricClient(coordinator.base_url, "alice-token")
    endpoint_id = wait_agent_endpoint(agent)
    wait_connected(client, endpoint_id)
    fid = register_bench_function(api, op="sleep_ms", ms=150)
    task_ids = [
        client.submit(fid, endpoint_id, Envelope(CODEC_RAW, b"%d" % i)) for i in range(20)
    ]
    max_outstanding = 0
    deadline = time.time() + 30
    done = 0
    while time.time() < deadline:
        for rec in list(agent.managers.values()):
            max_outstanding = max(max_outstanding, len(rec.outstanding))
        rows = client.export_tasks(endpoint_id)
        done = sum(1 for r in rows if r["state"] == "SUCCEEDED")
        if done >= 20:
            break
        time.sleep(0.02)
    assert done >= 20
    # with prefetch 0 a manager never holds more tasks than it has workers
    assert max_outstanding <= 4


def test_prefetch_allows_queueing_beyond_idle(coordinator, api, fabric):
    agent = fabric(prefetch_count=4)
    client = FabricClient(coordinator.base_url, "alice-token")
    endpoint_id = wait_agent_endpoint(agent)
    wait_connected(client, endpoint_id)
    fid = register_bench_function(api, op="sleep_ms", ms=150)
    task_ids = [
        client.submit(fid, endpoint_id, Envelope(CODEC_RAW, b"%d" % i)) for i in range(30)
    ]
    max_outstanding = 0
    deadline = time.time() + 30
    while time.time() < deadline:
        for rec in list(agent.managers.values()):
            max_outstanding = max(max_outstanding, len(rec.outstanding))
        rows = client.export_tasks(endpoint_id)
        if sum(1 for r in rows if r["state"] == "SUCCEEDED") >= 30:
            break
        time.sleep(0.02)
    assert max_outstanding > 4  # outstanding exceeded idle capacity
    assert max_outstanding <= 8  # but never beyond idle + prefetch allowance
