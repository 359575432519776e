"""Worker process entry point.

A worker executes one task at a time inside its sandbox. It blocks on its
stdin pipe waiting for dispatch frames from the manager and writes hello and
result frames to stdout. Nothing else may touch stdout: the module grabs the
raw descriptor at import of main and repoints sys.stdout at stderr so stray
prints cannot corrupt the frame stream.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from funcfab.node.runtimes import ExecutionError, execute_task
from funcfab.wire import payloads
from funcfab.wire.channel import (
    LINK_MAX_PAYLOAD,
    ZERO_CORR,
    json_env,
    read_pipe_frames,
)
from funcfab.wire.frames import MessageType, encode_frame


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="funcfab-worker")
    parser.add_argument("--worker-id", required=True)
    parser.add_argument("--tag", required=True)
    parser.add_argument("--startup-delay-ms", type=float, default=0.0)
    args = parser.parse_args(argv)

    inp = sys.stdin.buffer
    out = sys.stdout.buffer
    sys.stdout = sys.stderr  # stdout carries frames only

    if args.startup_delay_ms > 0:
        time.sleep(args.startup_delay_ms / 1000.0)

    def emit(msg_type, corr, env):
        out.write(encode_frame(msg_type, corr, env, LINK_MAX_PAYLOAD))
        out.flush()

    emit(
        MessageType.HEARTBEAT,
        ZERO_CORR,
        json_env(payloads.worker_hello(args.worker_id, args.tag, os.getpid())),
    )

    workdir = os.getcwd()
    for msg in read_pipe_frames(inp):
        if msg.msg_type is MessageType.SHUTDOWN_MANAGER:
            return 0
        if msg.msg_type is not MessageType.TASK_DISPATCH:
            continue
        task = json.loads(msg.env.payload.decode("utf-8"))
        task_id = task["task_id"]
        corr = bytes.fromhex(task_id)
        input_env = payloads.env_from_wire(task["input"])
        body = payloads.unb64(task["body"])
        try:
            result, exec_time = execute_task(
                task["runtime"], body, input_env, task.get("batch", False), workdir
            )
            reply = payloads.task_result(
                task_id, "success", result_env=result, exec_time=exec_time
            )
        except ExecutionError as exc:
            reply = payloads.task_result(
                task_id,
                "error",
                error={"type": exc.error_type, "message": exc.message},
            )
        except Exception as exc:  # defensive: the worker must survive
            reply = payloads.task_result(
                task_id,
                "error",
                error={"type": "WorkerInternal", "message": str(exc)},
            )
        emit(MessageType.TASK_RESULT, corr, json_env(reply, corr))
    return 0


if __name__ == "__main__":
    sys.exit(main())
