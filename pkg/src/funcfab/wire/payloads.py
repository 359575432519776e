"""Structured payload schemas for control-link messages.

All structured payloads ride as codec-1 (UTF-8 JSON) envelopes. Builders and
parsers live here so the forwarder, agent, manager, and worker agree on field
names. Binary payloads (function bodies, task inputs, results) are embedded
base64-encoded as {"c": codec_id, "p": base64} envelope dicts.
"""

from __future__ import annotations

import base64
from typing import Optional

from funcfab.core.envelope import Envelope


def env_to_wire(env: Envelope) -> dict:
    return {"c": env.codec_id, "p": base64.b64encode(env.payload).decode("ascii")}


def env_from_wire(data: dict) -> Envelope:
    return Envelope(int(data["c"]), base64.b64decode(data["p"]))


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    return base64.b64decode(text)


def register_agent(endpoint_id: str, token: str, session_id: str) -> dict:
    return {"endpoint_id": endpoint_id, "token": token, "session_id": session_id}


def register_ack(ok: bool, error: str = "", session_id: str = "",
                 heartbeat_interval: float = 1.0, miss_threshold: int = 3) -> dict:
    return {
        "ok": ok,
        "error": error,
        "session_id": session_id,
        "heartbeat_interval": heartbeat_interval,
        "miss_threshold": miss_threshold,
    }


def register_manager(manager_id: str, node_id: str, slots: int, tags: dict) -> dict:
    """``tags`` maps container tag -> count of live workers."""
    return {"manager_id": manager_id, "node_id": node_id, "slots": slots, "tags": tags}


def manager_advert(manager_id: str, tags: dict, slots_free: int) -> dict:
    """``tags`` maps tag -> {"idle": n, "anticipated": m, "deployed": k}."""
    return {"manager_id": manager_id, "tags": tags, "slots_free": slots_free}


def endpoint_advert(window: int) -> dict:
    """Aggregate dispatch window the endpoint is willing to accept."""
    return {"window": window}


def dispatch_task(
    task_id: str,
    function_id: str,
    version: int,
    runtime: str,
    container_tag: str,
    retriable: bool,
    attempt: int,
    batch: bool,
    input_env: Envelope,
    body: Optional[bytes] = None,
) -> dict:
    entry = {
        "task_id": task_id,
        "function_id": function_id,
        "version": version,
        "runtime": runtime,
        "container_tag": container_tag,
        "retriable": retriable,
        "attempt": attempt,
        "batch": batch,
        "input": env_to_wire(input_env),
    }
    if body is not None:
        entry["body"] = b64(body)
    return entry


def dispatch_frame(tasks: list) -> dict:
    return {"tasks": tasks}


def task_ack(task_ids: list) -> dict:
    return {"task_ids": task_ids}


def task_result(
    task_id: str,
    outcome: str,
    result_env: Optional[Envelope] = None,
    error: Optional[dict] = None,
    exec_time: float = 0.0,
    endpoint_time: float = 0.0,
) -> dict:
    body = {
        "task_id": task_id,
        "outcome": outcome,
        "exec_time": exec_time,
        "endpoint_time": endpoint_time,
    }
    if result_env is not None:
        body["result"] = env_to_wire(result_env)
    if error is not None:
        body["error"] = error
    return body


def worker_hello(worker_id: str, tag: str, pid: int) -> dict:
    return {"event": "hello", "worker_id": worker_id, "tag": tag, "pid": pid}
