"""Task execution runtimes.

The fabric treats function bodies as opaque bytes; this module is where
workers finally interpret them, according to the function's runtime tag:

  bench   body is a JSON op spec, one of
              {"op": "noop"}
              {"op": "sleep_ms", "ms": D}
              {"op": "stress_ms", "ms": D}     busy-loops a full core
              {"op": "echo"}                   returns the input envelope
              {"op": "fail", "message": M}
  shell   body is a command line run inside the sandbox working directory
          with the input payload on stdin; stdout becomes the result and a
          non-zero exit fails the task.

Batch inputs (a codec-1 list of element envelopes) execute sequentially and
return the list of per-element results in input order.
"""

from __future__ import annotations

import json
import subprocess
import time
from typing import Tuple

from funcfab.core.envelope import CODEC_RAW, CODEC_TEXT, Envelope, serialize
from funcfab.wire import payloads


class ExecutionError(Exception):
    def __init__(self, error_type: str, message: str):
        self.error_type = error_type
        self.message = message
        super().__init__("%s: %s" % (error_type, message))


def _run_bench(body: bytes, input_env: Envelope) -> Envelope:
    try:
        spec = json.loads(body.decode("utf-8"))
        op = spec["op"]
    except Exception as exc:
        raise ExecutionError("BadBody", "bench body is not a JSON op spec: %s" % exc)
    if op == "noop":
        return Envelope(CODEC_TEXT, b"null")
    if op == "sleep_ms":
        time.sleep(float(spec.get("ms", 0)) / 1000.0)
        return Envelope(CODEC_TEXT, b"null")
    if op == "stress_ms":
        deadline = time.monotonic() + float(spec.get("ms", 0)) / 1000.0
        x = 1.0
        while time.monotonic() < deadline:
            x = x * 1.0000001 + 1.0  # keep the core pinned
        return Envelope(CODEC_TEXT, b"null")
    if op == "echo":
        return Envelope(input_env.codec_id, input_env.payload)
    if op == "fail":
        raise ExecutionError("TaskFault", str(spec.get("message", "injected failure")))
    raise ExecutionError("BadBody", "unknown bench op %r" % op)


def _run_shell(body: bytes, input_env: Envelope, workdir: str) -> Envelope:
    try:
        command = body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ExecutionError("BadBody", "shell body is not UTF-8: %s" % exc)
    proc = subprocess.run(
        command,
        shell=True,
        cwd=workdir,
        input=input_env.payload,
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
    )
    if proc.returncode != 0:
        tail = proc.stderr[-2048:].decode("utf-8", "replace")
        raise ExecutionError(
            "NonZeroExit", "exit %d: %s" % (proc.returncode, tail.strip())
        )
    return Envelope(CODEC_RAW, proc.stdout)


def execute_one(runtime: str, body: bytes, input_env: Envelope, workdir: str) -> Envelope:
    if runtime == "bench":
        return _run_bench(body, input_env)
    if runtime == "shell":
        return _run_shell(body, input_env, workdir)
    raise ExecutionError("BadRuntime", "unknown runtime %r" % runtime)


def execute_task(
    runtime: str,
    body: bytes,
    input_env: Envelope,
    is_batch: bool,
    workdir: str,
) -> Tuple[Envelope, float]:
    """Execute a task (or a whole batch) and return (result, exec seconds)."""
    t0 = time.perf_counter()
    if not is_batch:
        result = execute_one(runtime, body, input_env, workdir)
        return result, time.perf_counter() - t0
    try:
        elements = json.loads(input_env.payload.decode("utf-8"))
        envs = [payloads.env_from_wire(e) for e in elements]
    except Exception as exc:
        raise ExecutionError("BadBatch", "batch input is malformed: %s" % exc)
    results = []
    for env in envs:
        results.append(payloads.env_to_wire(execute_one(runtime, body, env, workdir)))
    out = serialize(results, registry=(CODEC_TEXT,))
    return out, time.perf_counter() - t0
