import base64
import json
import time

import pytest

from funcfab.wire import payloads
from funcfab.wire.frames import MessageType

from conftest import Api, FakeAgent, TOKENS, register_bench_function, submit_raw


def register_endpoint(api, name="ep"):
    return api.post("/api/endpoints", {"name": name})


def test_function_register_fetchable_and_versioned(coordinator, api):
    fid = register_bench_function(api, name="echo-fn")
    func = coordinator.store.get_function(fid)
    assert func.body == b'{"op": "echo"}'
    # owner update bumps the version under the same id
    out = api.post(
        "/api/functions",
        {
            "name": "echo-fn",
            "body": payloads.b64(b'{"op": "noop"}'),
            "runtime": "bench",
            "function_id": fid,
        },
    )
    assert out == {"function_id": fid, "version": 2}
    assert coordinator.store.get_function(fid).body == b'{"op": "noop"}'


def test_non_owner_update_rejected(coordinator, api):
    fid = register_bench_function(api)
    bob = Api(coordinator.base_url, "bob-token")
    resp = bob.session.post(
        coordinator.base_url + "/api/functions",
        json={"name": "x", "body": "", "runtime": "bench", "function_id": fid},
        timeout=10,
    )
    assert resp.status_code == 401


def test_identical_bodies_distinct_ids(coordinator, api):
    a = register_bench_function(api)
    b = register_bench_function(api)
    assert a != b


def test_oversized_body_rejected(coordinator, api):
    big = base64.b64encode(b"\x00" * (1024 * 1024 + 1)).decode()
    resp = api.session.post(
        coordinator.base_url + "/api/functions",
        json={"name": "big", "body": big, "runtime": "bench"},
        timeout=30,
    )
    assert resp.status_code == 413
    assert resp.json()["cap"] == 1024 * 1024


def test_unknown_token_unauthorized(coordinator):
    bad = Api(coordinator.base_url, "nope")
    resp = bad.session.post(
        coordinator.base_url + "/api/functions",
        json={"name": "x", "body": "", "runtime": "bench"},
        timeout=10,
    )
    assert resp.status_code == 401


def test_endpoint_registration_and_distinct_ports(coordinator, api):
    ep1 = register_endpoint(api)
    ep2 = register_endpoint(api)
    assert ep1["endpoint_id"] != ep2["endpoint_id"]
    assert ep1["forwarder_port"] != ep2["forwarder_port"]
    info = api.get("/api/endpoints/" + ep1["endpoint_id"])
    assert info["state"] == "REGISTERED"
    assert info["queue_depth"] == 0


def test_reregistration_reuses_queues_and_forwarder(coordinator, api):
    ep = register_endpoint(api)
    fid = register_bench_function(api)
    submit_raw(api, fid, ep["endpoint_id"], b"a")
    again = api.post("/api/endpoints", {"endpoint_id": ep["endpoint_id"]})
    assert again["endpoint_id"] == ep["endpoint_id"]
    assert again["forwarder_port"] == ep["forwarder_port"]
    assert api.get("/api/endpoints/" + ep["endpoint_id"])["queue_depth"] == 1


def test_submit_unknown_ids(coordinator, api):
    ep = register_endpoint(api)
    fid = register_bench_function(api)
    resp = api.session.post(
        coordinator.base_url + "/api/tasks",
        json={"function_id": "00" * 16, "endpoint_id": ep["endpoint_id"],
              "input": {"c": 0, "p": ""}},
        timeout=10,
    )
    assert resp.status_code == 404
    resp = api.session.post(
        coordinator.base_url + "/api/tasks",
        json={"function_id": fid, "endpoint_id": "00" * 16,
              "input": {"c": 0, "p": ""}},
        timeout=10,
    )
    assert resp.status_code == 404


def test_submit_authorization_allow_list(coordinator, api):
    ep = register_endpoint(api)
    fid = register_bench_function(api)
    bob = Api(coordinator.base_url, "bob-token")
    resp = bob.session.post(
        coordinator.base_url + "/api/tasks",
        json={"function_id": fid, "endpoint_id": ep["endpoint_id"],
              "input": {"c": 0, "p": ""}},
        timeout=10,
    )
    assert resp.status_code == 401
    # share with bob and retry
    api.post(
        "/api/functions",
        {
            "name": "f",
            "body": payloads.b64(b'{"op": "echo"}'),
            "runtime": "bench",
            "function_id": fid,
            "allowed_principals": ["bob"],
        },
    )
    out = bob.post(
        "/api/tasks",
        {"function_id": fid, "endpoint_id": ep["endpoint_id"],
         "input": {"c": 0, "p": ""}},
    )
    assert "task_id" in out


def test_submit_and_queue_growth(coordinator, api):
    ep = register_endpoint(api)
    fid = register_bench_function(api)
    ids = {submit_raw(api, fid, ep["endpoint_id"], bytes([i])) for i in range(100)}
    assert len(ids) == 100
    info = api.get("/api/endpoints/" + ep["endpoint_id"])
    assert info["queue_depth"] == 100
    status = api.get("/api/tasks/" + next(iter(ids)))
    assert status["state"] == "QUEUED"


def test_queue_unchanged_without_agent(coordinator, api):
    ep = register_endpoint(api)
    fid = register_bench_function(api)
    for i in range(5):
        submit_raw(api, fid, ep["endpoint_id"], bytes([i]))
    time.sleep(0.6)  # several heartbeat intervals
    assert api.get("/api/endpoints/" + ep["endpoint_id"])["queue_depth"] == 5


def test_dispatch_and_result_round_trip(coordinator, api):
    ep = register_endpoint(api)
    fid = register_bench_function(api)
    task_id = submit_raw(api, fid, ep["endpoint_id"], b"hello-world")
    agent = FakeAgent(ep["forwarder_host"], ep["forwarder_port"], ep["endpoint_id"])
    assert agent.ack["ok"]
    assert api.get("/api/endpoints/" + ep["endpoint_id"])["state"] == "CONNECTED"
    agent.advertise(8)
    (task,) = agent.wait_tasks(1)
    assert task["task_id"] == task_id
    assert payloads.unb64(task["body"]) == b'{"op": "echo"}'
    assert payloads.env_from_wire(task["input"]).payload == b"hello-world"
    agent.ack_tasks([task_id])
    agent.send_result(task_id, result_env=payloads.env_from_wire(task["input"]))
    env = None
    for _ in range(100):
        resp = api.session.get(
            coordinator.base_url + "/api/tasks/%s/result" % task_id, timeout=10
        )
        if resp.status_code == 200:
            env = resp.json()
            break
        time.sleep(0.02)
    assert env is not None
    assert payloads.unb64(env["p"]) == b"hello-world"
    status = api.get("/api/tasks/" + task_id)
    assert status["state"] == "SUCCEEDED"
    assert status["timing"]["service_time"] > 0
    assert status["timing"]["forwarder_time"] > 0
    agent.close()


def test_body_sent_once_per_session(coordinator, api):
    ep = register_endpoint(api)
    fid = register_bench_function(api)
    id1 = submit_raw(api, fid, ep["endpoint_id"], b"a")
    id2 = submit_raw(api, fid, ep["endpoint_id"], b"b")
    agent = FakeAgent(ep["forwarder_host"], ep["forwarder_port"], ep["endpoint_id"])
    agent.advertise(1)  # force two separate dispatch frames
    (first,) = agent.wait_tasks(1)
    agent.send_result(first["task_id"], value=None)
    agent.advertise(2)
    tasks = agent.wait_tasks(2)
    assert "body" in tasks[0]
    assert "body" not in tasks[1]
    agent.close()


def test_get_result_before_completion_not_ready(coordinator, api):
    ep = register_endpoint(api)
    fid = register_bench_function(api)
    task_id = submit_raw(api, fid, ep["endpoint_id"], b"x")
    resp = api.session.get(
        coordinator.base_url + "/api/tasks/%s/result" % task_id, timeout=10
    )
    assert resp.status_code == 202
    assert resp.json()["error"] == "NotReady"


def test_result_purged_after_grace(tmp_path):
    from funcfab.service.config import CoordinatorConfig
    from funcfab.service.coordinator import Coordinator
    from funcfab.service.http_api import ApiServer
    from funcfab.wire.heartbeat import HeartbeatConfig

    cfg = CoordinatorConfig(
        db_path=str(tmp_path / "p.db"),
        tokens=dict(TOKENS),
        purge_grace_s=0.15,
        purge_interval_s=0.05,
        heartbeat=HeartbeatConfig(interval=0.2, miss_threshold=3),
    )
    coord = Coordinator(cfg)
    coord.start()
    server = ApiServer(coord, cfg.host, cfg.port)
    server.start()
    base = "http://%s:%d" % server.address
    api = Api(base, "alice-token")
    try:
        ep = api.post("/api/endpoints", {"name": "ep"})
        fid = register_bench_function(api)
        task_id = submit_raw(api, fid, ep["endpoint_id"], b"x")
        agent = FakeAgent(ep["forwarder_host"], ep["forwarder_port"], ep["endpoint_id"])
        agent.advertise(4)
        agent.wait_tasks(1)
        agent.send_result(task_id, result_env=payloads.env_from_wire({"c": 0, "p": payloads.b64(b"r")}))
        for _ in range(100):
            resp = api.session.get(base + "/api/tasks/%s/result" % task_id, timeout=10)
            if resp.status_code == 200:
                break
            time.sleep(0.02)
        assert resp.status_code == 200
        # within the grace period the same bytes come back
        again = api.get("/api/tasks/%s/result" % task_id)
        assert payloads.unb64(again["p"]) == b"r"
        # after the grace period the result is purged
        time.sleep(0.5)
        resp = api.session.get(base + "/api/tasks/%s/result" % task_id, timeout=10)
        assert resp.status_code == 410
        assert resp.json()["error"] == "ResultPurged"
        agent.close()
    finally:
        server.stop()
        coord.stop()


def test_disconnect_requeues_in_flight(coordinator, api):
    ep = register_endpoint(api)
    fid = register_bench_function(api)
    ids = [submit_raw(api, fid, ep["endpoint_id"], bytes([i])) for i in range(7)]
    agent = FakeAgent(ep["forwarder_host"], ep["forwarder_port"], ep["endpoint_id"])
    agent.advertise(16)
    agent.wait_tasks(7)
    agent.close()  # hard loss
    deadline = time.time() + 5
    while time.time() < deadline:
        info = api.get("/api/endpoints/" + ep["endpoint_id"])
        if info["state"] == "DISCONNECTED" and info["queue_depth"] == 7:
            break
        time.sleep(0.05)
    assert info["state"] == "DISCONNECTED"
    assert info["queue_depth"] == 7
    assert info["in_flight"] == 0
    assert info["metrics"]["requeued"] == 7
    for task_id in ids:
        status = api.get("/api/tasks/" + task_id)
        assert status["state"] == "QUEUED"
        assert status["attempt"] == 1


def test_non_retriable_fails_on_disconnect(coordinator, api):
    ep = register_endpoint(api)
    fid = register_bench_function(api)
    task_id = submit_raw(api, fid, ep["endpoint_id"], b"x", retriable=False)
    agent = FakeAgent(ep["forwarder_host"], ep["forwarder_port"], ep["endpoint_id"])
    agent.advertise(4)
    agent.wait_tasks(1)
    agent.close()
    deadline = time.time() + 5
    while time.time() < deadline:
        status = api.get("/api/tasks/" + task_id)
        if status["state"] == "FAILED":
            break
        time.sleep(0.05)
    assert status["state"] == "FAILED"
    assert status["error"]["type"] == "lost"
    resp = api.session.get(
        coordinator.base_url + "/api/tasks/%s/result" % task_id, timeout=10
    )
    assert resp.status_code == 409


def test_duplicate_results_discarded_first_wins(coordinator, api):
    ep = register_endpoint(api)
    fid = register_bench_function(api)
    task_id = submit_raw(api, fid, ep["endpoint_id"], b"x")
    agent = FakeAgent(ep["forwarder_host"], ep["forwarder_port"], ep["endpoint_id"])
    agent.advertise(4)
    agent.wait_tasks(1)
    agent.send_result(task_id, result_env=payloads.env_from_wire({"c": 0, "p": payloads.b64(b"first")}))
    agent.send_result(task_id, result_env=payloads.env_from_wire({"c": 0, "p": payloads.b64(b"second")}))
    deadline = time.time() + 5
    metrics = None
    while time.time() < deadline:
        metrics = api.get("/api/endpoints/" + ep["endpoint_id"])["metrics"]
        if metrics["duplicates_discarded"] >= 1:
            break
        time.sleep(0.05)
    assert metrics["duplicates_discarded"] == 1
    env = api.get("/api/tasks/%s/result" % task_id)
    assert payloads.unb64(env["p"]) == b"first"


def test_memo_submit_hit_no_dispatch(coordinator, api):
    ep = register_endpoint(api)
    fid = register_bench_function(api, memoize=True)
    task_id = submit_raw(api, fid, ep["endpoint_id"], b"same")
    agent = FakeAgent(ep["forwarder_host"], ep["forwarder_port"], ep["endpoint_id"])
    agent.advertise(4)
    agent.wait_tasks(1)
    agent.send_result(task_id, result_env=payloads.env_from_wire({"c": 0, "p": payloads.b64(b"out")}))
    deadline = time.time() + 5
    while time.time() < deadline:
        if api.get("/api/tasks/" + task_id)["state"] == "SUCCEEDED":
            break
        time.sleep(0.02)
    dispatched_before = api.get("/api/endpoints/" + ep["endpoint_id"])["metrics"]["dispatched"]
    second = submit_raw(api, fid, ep["endpoint_id"], b"same")
    status = api.get("/api/tasks/" + second)
    assert status["state"] == "SUCCEEDED"
    assert status["memo_hit"] is True
    env = api.get("/api/tasks/%s/result" % second)
    assert payloads.unb64(env["p"]) == b"out"
    time.sleep(0.3)
    dispatched_after = api.get("/api/endpoints/" + ep["endpoint_id"])["metrics"]["dispatched"]
    assert dispatched_after == dispatched_before
    agent.close()


def test_batch_submit_precedence_and_sizes(coordinator, api):
    ep = register_endpoint(api)
    fid = register_bench_function(api)
    inputs = [{"c": 0, "p": payloads.b64(bytes([i]))} for i in range(10)]
    out = api.post(
        "/api/batches",
        {
            "function_id": fid,
            "endpoint_id": ep["endpoint_id"],
            "inputs": inputs,
            "batch_size": 2,
            "batch_count": 4,
        },
    )
    assert len(out["task_ids"]) == 4
    assert out["sizes"] == [3, 3, 2, 2]
    out2 = api.post(
        "/api/batches",
        {
            "function_id": fid,
            "endpoint_id": ep["endpoint_id"],
            "inputs": inputs,
            "batch_size": 5,
        },
    )
    assert len(out2["task_ids"]) == 2
    resp = api.session.post(
        coordinator.base_url + "/api/batches",
        json={"function_id": fid, "endpoint_id": ep["endpoint_id"], "inputs": inputs},
        timeout=10,
    )
    assert resp.status_code == 400


def test_delete_endpoint(coordinator, api):
    ep = register_endpoint(api)
    fid = register_bench_function(api)
    api.delete("/api/endpoints/" + ep["endpoint_id"])
    resp = api.session.post(
        coordinator.base_url + "/api/tasks",
        json={"function_id": fid, "endpoint_id": ep["endpoint_id"],
              "input": {"c": 0, "p": ""}},
        timeout=10,
    )
    assert resp.status_code == 404


def test_agent_auth_rejected(coordinator, api):
    ep = register_endpoint(api)
    agent = FakeAgent(
        ep["forwarder_host"], ep["forwarder_port"], ep["endpoint_id"], token="bad"
    )
    assert agent.ack["ok"] is False
    assert agent.ack["error"] == "AuthRejected"


def test_session_replacement_requeues(coordinator, api):
    ep = register_endpoint(api)
    fid = register_bench_function(api)
    ids = [submit_raw(api, fid, ep["endpoint_id"], bytes([i])) for i in range(3)]
    first = FakeAgent(ep["forwarder_host"], ep["forwarder_port"], ep["endpoint_id"])
    first.advertise(8)
    first.wait_tasks(3)
    # a fresh agent session replaces the old one; in-flight tasks requeue
    second = FakeAgent(
        ep["forwarder_host"], ep["forwarder_port"], ep["endpoint_id"], session_id="s2"
    )
    second.advertise(8)
    tasks = second.wait_tasks(3)
    assert {t["task_id"] for t in tasks} == set(ids)
    assert all(t["attempt"] == 1 for t in tasks)
    second.close()


def test_coordinator_restart_preserves_queue(tmp_path):
    from funcfab.service.config import CoordinatorConfig
    from funcfab.service.coordinator import Coordinator
    from funcfab.service.http_api import ApiServer
    from funcfab.wire.heartbeat import HeartbeatConfig

    db = str(tmp_path / "restart.db")

    def boot():
        cfg = CoordinatorConfig(
            db_path=db, tokens=dict(TOKENS),
            heartbeat=HeartbeatConfig(interval=0.2, miss_threshold=3),
        )
        coord = Coordinator(cfg)
        coord.start()
        server = ApiServer(coord, cfg.host, cfg.port)
        server.start()
        return coord, server, Api("http://%s:%d" % server.address, "alice-token")

    coord, server, api = boot()
    ep = api.post("/api/endpoints", {"name": "ep"})
    fid = register_bench_function(api)
    ids = [submit_raw(api, fid, ep["endpoint_id"], bytes([i])) for i in range(4)]
    agent = FakeAgent(ep["forwarder_host"], ep["forwarder_port"], ep["endpoint_id"])
    agent.advertise(2)
    agent.wait_tasks(2)  # two in flight, two queued
    server.stop()
    coord.stop()

    coord2, server2, api2 = boot()
    try:
        info = api2.get("/api/endpoints/" + ep["endpoint_id"])
        assert info["queue_depth"] == 4  # the in-flight pair was recovered
        for task_id in ids:
            assert api2.get("/api/tasks/" + task_id)["state"] == "QUEUED"
    finally:
        server2.stop()
        coord2.stop()
