"""Records for registered functions and task invocations."""

from __future__ import annotations

import enum
import time
import uuid
from dataclasses import dataclass, field
from typing import Optional, Tuple

from funcfab.core.envelope import Envelope
from funcfab.core.lifecycle import TaskState


def new_id() -> str:
    """Fresh 128-bit identifier as 32 hex characters."""
    return uuid.uuid4().hex


class Runtime(str, enum.Enum):
    BENCH = "bench"
    SHELL = "shell"


@dataclass(frozen=True)
class FunctionRecord:
    """A registered function. The fabric never parses ``body``; workers
    interpret it according to ``runtime``."""

    function_id: str
    name: str
    body: bytes
    runtime: Runtime
    container_tag: str
    memoize: bool
    owner: str
    allowed_principals: frozenset
    registered_at: float
    version: int = 1

    def __post_init__(self):
        if self.owner not in self.allowed_principals:
            object.__setattr__(
                self, "allowed_principals", self.allowed_principals | {self.owner}
            )


@dataclass(frozen=True)
class TimingBreakdown:
    """Per-hop durations in seconds.

    service_time   coordinator work: authenticate, persist, enqueue
    forwarder_time forwarder work: dequeue + send, receive + persist result
    endpoint_time  endpoint residence minus execution
    exec_time      worker execution only
    """

    service_time: float = 0.0
    forwarder_time: float = 0.0
    endpoint_time: float = 0.0
    exec_time: float = 0.0

    def __post_init__(self):
        for name in ("service_time", "forwarder_time", "endpoint_time", "exec_time"):
            if getattr(self, name) < 0:
                raise ValueError("%s must be non-negative" % name)


@dataclass(frozen=True)
class TaskError:
    type: str
    message: str

    def as_dict(self):
        return {"type": self.type, "message": self.message}

    @classmethod
    def from_dict(cls, data):
        return cls(type=data.get("type", "error"), message=data.get("message", ""))


@dataclass(frozen=True)
class TaskRecord:
    """One function invocation and its lifecycle so far."""

    task_id: str
    function_id: str
    function_version: int
    endpoint_id: str
    input: Envelope
    submitter: str
    state: TaskState = TaskState.RECEIVED
    result: Optional[Envelope] = None
    error: Optional[TaskError] = None
    retriable: bool = True
    attempt: int = 0
    timing: TimingBreakdown = field(default_factory=TimingBreakdown)
    transitions: Tuple = ()
    created_at: float = field(default_factory=time.time)
    terminal_at: Optional[float] = None
    memo_hit: bool = False
    batch_size: int = 1

    @property
    def terminal(self) -> bool:
        return self.state in (TaskState.SUCCEEDED, TaskState.FAILED)

    @property
    def correlation_id(self) -> bytes:
        return bytes.fromhex(self.task_id)
