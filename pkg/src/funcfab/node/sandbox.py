"""Worker sandboxes.

Real container isolation is out of scope at desk scale; the stand-in is a
child process pinned to a private working directory with an allow-listed
environment and optional CPU / address-space rlimits. Each container tag
maps to one SandboxSpec; a worker of tag T always launches from
SandboxSpec[T].
"""

from __future__ import annotations

import os
import resource
import shutil
import subprocess
import sys
from dataclasses import dataclass, field
from typing import Dict, Optional

_BASE_ENV_KEYS = ("PATH", "PYTHONPATH", "HOME", "LANG", "LC_ALL", "VIRTUAL_ENV")


class LaunchFailure(Exception):
    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__("%s%s" % (reason, ": %s" % detail if detail else ""))


@dataclass
class SandboxSpec:
    tag: str
    env: Dict[str, str] = field(default_factory=dict)
    cpu_time_s: Optional[int] = None
    memory_bytes: Optional[int] = None
    startup_delay_ms: float = 0.0  # models container image start cost

    @classmethod
    def from_dict(cls, tag: str, data: dict) -> "SandboxSpec":
        data = data or {}
        return cls(
            tag=tag,
            env=dict(data.get("env", {})),
            cpu_time_s=data.get("cpu_time_s"),
            memory_bytes=data.get("memory_bytes"),
            startup_delay_ms=float(data.get("startup_delay_ms", 0.0)),
        )


def _limits_preexec(spec: SandboxSpec):
    def _apply():
        if spec.cpu_time_s is not None:
            resource.setrlimit(resource.RLIMIT_CPU, (spec.cpu_time_s, spec.cpu_time_s))
        if spec.memory_bytes is not None:
            resource.setrlimit(
                resource.RLIMIT_AS, (spec.memory_bytes, spec.memory_bytes)
            )

    return _apply


def launch_worker(
    spec: SandboxSpec, worker_id: str, base_dir: str
) -> subprocess.Popen:
    """Spawn a sandboxed worker process speaking frames on stdin/stdout."""
    workdir = os.path.join(base_dir, worker_id)
    shutil.rmtree(workdir, ignore_errors=True)
    os.makedirs(workdir, exist_ok=True)
    env = {k: os.environ[k] for k in _BASE_ENV_KEYS if k in os.environ}
    env.update(spec.env)
    env["FUNCFAB_WORKER_ID"] = worker_id
    env["FUNCFAB_TAG"] = spec.tag
    cmd = [
        sys.executable,
        "-m",
        "funcfab.node.worker",
        "--worker-id",
        worker_id,
        "--tag",
        spec.tag,
    ]
    if spec.startup_delay_ms:
        cmd += ["--startup-delay-ms", str(spec.startup_delay_ms)]
    try:
        return subprocess.Popen(
            cmd,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=sys.stderr,
            cwd=workdir,
            env=env,
            preexec_fn=_limits_preexec(spec),
        )
    except OSError as exc:
        raise LaunchFailure("SpawnFailed", str(exc)) from exc
