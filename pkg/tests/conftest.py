import json
import queue
import socket
import threading
import time

import pytest
import requests

from funcfab.core.envelope import CODEC_TEXT, Envelope
from funcfab.service.config import CoordinatorConfig
from funcfab.service.coordinator import Coordinator
from funcfab.service.http_api import ApiServer
from funcfab.wire import payloads
from funcfab.wire.channel import FrameChannel, LINK_MAX_PAYLOAD, json_body
from funcfab.wire.frames import MessageType
from funcfab.wire.heartbeat import HeartbeatConfig

TOKENS = {"alice-token": "alice", "bob-token": "bob", "agent-token": "alice"}


@pytest.fixture
def coordinator(tmp_path):
    cfg = CoordinatorConfig(
        host="127.0.0.1",
        port=0,
        db_path=str(tmp_path / "coordinator.db"),
        tokens=dict(TOKENS),
        purge_grace_s=600.0,
        purge_interval_s=0.1,
        heartbeat=HeartbeatConfig(interval=0.2, miss_threshold=3),
    )
    coord = Coordinator(cfg)
    coord.start()
    server = ApiServer(coord, cfg.host, cfg.port)
    server.start()
    coord.http_address = server.address
    coord.base_url = "http://%s:%d" % server.address
    yield coord
    server.stop()
    coord.stop()


class Api:
    """Minimal HTTP helper bound to one principal."""

    def __init__(self, base_url, token):
        self.base_url = base_url
        self.session = requests.Session()
        self.session.headers["Authorization"] = "Bearer " + token

    def post(self, path, body, expect=200):
        resp = self.session.post(self.base_url + path, json=body, timeout=10)
        assert resp.status_code == expect, (resp.status_code, resp.text)
        return resp.json()

    def get(self, path, expect=200, **kw):
        resp = self.session.get(self.base_url + path, timeout=10, **kw)
        assert resp.status_code == expect, (resp.status_code, resp.text)
        return resp.json()

    def delete(self, path, expect=200):
        resp = self.session.delete(self.base_url + path, timeout=10)
        assert resp.status_code == expect, (resp.status_code, resp.text)
        return resp.json()


@pytest.fixture
def api(coordinator):
    return Api(coordinator.base_url, "alice-token")


class FakeAgent:
    """Scriptable endpoint agent for exercising the forwarder protocol."""

    def __init__(self, host, port, endpoint_id, token="agent-token", session_id="s1"):
        sock = socket.create_connection((host, port), timeout=5)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.channel = FrameChannel(sock, LINK_MAX_PAYLOAD)
        self.inbox = queue.Queue()
        self.dispatched = []  # task dicts in arrival order
        self.closed = threading.Event()
        self.channel.start_reader(
            on_message=self._on_message,
            on_close=self.closed.set,
            name="fake-agent",
        )
        self.channel.send_json(
            MessageType.REGISTER_AGENT,
            payloads.register_agent(endpoint_id, token, session_id),
        )
        ack = self.expect(MessageType.REGISTER_ACK)
        self.ack = json_body(ack)

    def _on_message(self, msg):
        if msg.msg_type is MessageType.TASK_DISPATCH:
            self.dispatched.extend(json_body(msg)["tasks"])
        self.inbox.put(msg)

    def expect(self, msg_type, timeout=5.0):
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise AssertionError("timed out waiting for %s" % msg_type)
            msg = self.inbox.get(timeout=remaining)
            if msg.msg_type is msg_type:
                return msg

    def advertise(self, window):
        self.channel.send_json(
            MessageType.CAPACITY_ADVERT, payloads.endpoint_advert(window)
        )

    def wait_tasks(self, n, timeout=5.0):
        deadline = time.monotonic() + timeout
        while len(self.dispatched) < n:
            if time.monotonic() > deadline:
                raise AssertionError(
                    "expected %d dispatches, saw %d" % (n, len(self.dispatched))
                )
            time.sleep(0.01)
        return self.dispatched[:n]

    def ack_tasks(self, task_ids):
        self.channel.send_json(MessageType.TASK_ACK, payloads.task_ack(list(task_ids)))

    def send_result(self, task_id, value=None, outcome="success", error=None,
                    result_env=None, exec_time=0.001, endpoint_time=0.001):
        if result_env is None and outcome == "success":
            result_env = Envelope(
                CODEC_TEXT, json.dumps(value, separators=(",", ":")).encode()
            )
        body = payloads.task_result(
            task_id,
            outcome,
            result_env=result_env,
            error=error,
            exec_time=exec_time,
            endpoint_time=endpoint_time,
        )
        self.channel.send_json(
            MessageType.TASK_RESULT, body, bytes.fromhex(task_id)
        )

    def heartbeat(self):
        self.channel.send_json(MessageType.HEARTBEAT, {})

    def close(self):
        self.channel.close()


def register_bench_function(api, op="echo", name="fn", memoize=False, **kw):
    body = json.dumps({"op": op, **kw})
    return api.post(
        "/api/functions",
        {
            "name": name,
            "body": payloads.b64(body.encode()),
            "runtime": "bench",
            "memoize": memoize,
        },
    )["function_id"]


def submit_raw(api, function_id, endpoint_id, data: bytes, retriable=True):
    return api.post(
        "/api/tasks",
        {
            "function_id": function_id,
            "endpoint_id": endpoint_id,
            "input": {"c": 0, "p": payloads.b64(data)},
            "retriable": retriable,
        },
    )["task_id"]
