"""Thin requests-based client for the coordinator HTTP API."""

from __future__ import annotations

import time
from typing import Iterable, List, Optional, Tuple

import requests

from funcfab.core.envelope import Envelope, serialize
from funcfab.wire import payloads


class ClientError(Exception):
    def __init__(self, status: int, body: dict):
        self.status = status
        self.body = body
        super().__init__("HTTP %d: %s" % (status, body))


class TaskFailedError(ClientError):
    pass


class TaskTimeout(Exception):
    pass


class ResultNotReady(Exception):
    pass


class FabricClient:
    def __init__(self, base_url: str, token: str, poll_interval: float = 0.05):
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.poll_interval = poll_interval
        self.session = requests.Session()
        self.session.headers["Authorization"] = "Bearer " + token

    # ------------------------------------------------------------------

    def _check(self, resp: requests.Response) -> dict:
        try:
            body = resp.json()
        except ValueError:
            body = {"raw": resp.text}
        if resp.status_code == 200:
            return body
        if body.get("error") == "TaskFailed":
            raise TaskFailedError(resp.status_code, body)
        raise ClientError(resp.status_code, body)

    def register_function(
        self,
        name: str,
        body: bytes,
        runtime: str = "bench",
        container_tag: str = "",
        memoize: bool = False,
        allowed_principals: Iterable[str] = (),
        function_id: Optional[str] = None,
    ) -> str:
        req = {
            "name": name,
            "body": payloads.b64(body),
            "runtime": runtime,
            "container_tag": container_tag,
            "memoize": memoize,
            "allowed_principals": list(allowed_principals),
        }
        if function_id:
            req["function_id"] = function_id
        data = self._check(
            self.session.post(self.base_url + "/api/functions", json=req, timeout=30)
        )
        return data["function_id"]

    def register_endpoint(self, name: str = "", endpoint_id: Optional[str] = None) -> dict:
        req = {"name": name}
        if endpoint_id:
            req["endpoint_id"] = endpoint_id
        return self._check(
            self.session.post(self.base_url + "/api/endpoints", json=req, timeout=30)
        )

    def submit(
        self,
        function_id: str,
        endpoint_id: str,
        input_env: Envelope,
        retriable: bool = True,
    ) -> str:
        req = {
            "function_id": function_id,
            "endpoint_id": endpoint_id,
            "input": payloads.env_to_wire(input_env),
            "retriable": retriable,
        }
        data = self._check(
            self.session.post(self.base_url + "/api/tasks", json=req, timeout=30)
        )
        return data["task_id"]

    def submit_value(self, function_id: str, endpoint_id: str, value, **kw) -> str:
        return self.submit(function_id, endpoint_id, serialize(value), **kw)

    def submit_batch(
        self,
        function_id: str,
        endpoint_id: str,
        inputs: Iterable[Envelope],
        batch_size: Optional[int] = None,
        batch_count: Optional[int] = None,
        retriable: bool = True,
    ) -> Tuple[List[str], List[int]]:
        req = {
            "function_id": function_id,
            "endpoint_id": endpoint_id,
            "inputs": [payloads.env_to_wire(e) for e in inputs],
            "retriable": retriable,
        }
        if batch_size is not None:
            req["batch_size"] = batch_size
        if batch_count is not None:
            req["batch_count"] = batch_count
        data = self._check(
            self.session.post(self.base_url + "/api/batches", json=req, timeout=60)
        )
        return data["task_ids"], data["sizes"]

    def status(self, task_id: str) -> dict:
        return self._check(
            self.session.get(self.base_url + "/api/tasks/" + task_id, timeout=30)
        )

    def try_result(self, task_id: str) -> Envelope:
        resp = self.session.get(
            self.base_url + "/api/tasks/%s/result" % task_id, timeout=30
        )
        if resp.status_code == 202:
            raise ResultNotReady(task_id)
        data = self._check(resp)
        return payloads.env_from_wire(data)

    def result(self, task_id: str, timeout: float = 30.0) -> Envelope:
        """Poll until the task is terminal; raises TaskTimeout / TaskFailedError."""
        deadline = time.monotonic() + timeout
        while True:
            try:
                return self.try_result(task_id)
            except ResultNotReady:
                if time.monotonic() >= deadline:
                    raise TaskTimeout(task_id) from None
                time.sleep(self.poll_interval)

    def endpoint_info(self, endpoint_id: str) -> dict:
        return self._check(
            self.session.get(self.base_url + "/api/endpoints/" + endpoint_id, timeout=30)
        )

    def delete_endpoint(self, endpoint_id: str) -> dict:
        return self._check(
            self.session.delete(
                self.base_url + "/api/endpoints/" + endpoint_id, timeout=30
            )
        )

    def export_tasks(self, endpoint_id: Optional[str] = None) -> List[dict]:
        params = {}
        if endpoint_id:
            params["endpoint_id"] = endpoint_id
        data = self._check(
            self.session.get(
                self.base_url + "/api/tasks/export", params=params, timeout=120
            )
        )
        return data["tasks"]

    def wait_all(self, task_ids: Iterable[str], timeout: float = 60.0,
                 poll: float = 0.25) -> dict:
        """Wait until every task is terminal; returns {task_id: state}."""
        remaining = set(task_ids)
        states = {}
        deadline = time.monotonic() + timeout
        while remaining:
            rows = self.export_tasks()
            for row in rows:
                if row["task_id"] in remaining and row["state"] in ("SUCCEEDED", "FAILED"):
                    states[row["task_id"]] = row["state"]
                    remaining.discard(row["task_id"])
            if not remaining:
                break
            if time.monotonic() >= deadline:
                raise TaskTimeout("%d tasks still pending" % len(remaining))
            time.sleep(poll)
        return states
