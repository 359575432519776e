"""Task lifecycle state machine.

The happy path walks RECEIVED -> QUEUED -> DISPATCHED -> SCHEDULED ->
RUNNING -> SUCCEEDED/FAILED. Tasks in flight when a link or process dies
move to LOST_REQUEUED (retriable) or FAILED (not), and LOST_REQUEUED always
returns to QUEUED. SUCCEEDED and FAILED are the only terminal states.
"""

from __future__ import annotations

import dataclasses
import enum
import time
from typing import Dict, FrozenSet, Tuple


class TaskState(str, enum.Enum):
    RECEIVED = "RECEIVED"
    QUEUED = "QUEUED"
    DISPATCHED = "DISPATCHED"
    SCHEDULED = "SCHEDULED"
    RUNNING = "RUNNING"
    SUCCEEDED = "SUCCEEDED"
    FAILED = "FAILED"
    LOST_REQUEUED = "LOST_REQUEUED"


class LifecycleEvent(str, enum.Enum):
    PERSISTED = "persisted"    # accepted and written to the durable queue
    DELIVERED = "delivered"    # forwarder pushed the task over the agent link
    ASSIGNED = "assigned"      # endpoint acknowledged ownership of the task
    STARTED = "started"        # a worker began executing
    COMPLETED = "completed"    # worker returned a result
    FAILED = "failed"          # worker returned an error
    LOST = "lost"              # holder of the task disappeared
    DEQUEUED = "dequeued"      # requeue path: pulled out of the loss pen

TERMINAL_STATES: FrozenSet[TaskState] = frozenset(
    {TaskState.SUCCEEDED, TaskState.FAILED}
)

LOSABLE_STATES: FrozenSet[TaskState] = frozenset(
    {TaskState.DISPATCHED, TaskState.SCHEDULED, TaskState.RUNNING}
)

_EDGES: Dict[Tuple[TaskState, LifecycleEvent], TaskState] = {
    (TaskState.RECEIVED, LifecycleEvent.PERSISTED): TaskState.QUEUED,
    (TaskState.QUEUED, LifecycleEvent.DELIVERED): TaskState.DISPATCHED,
    (TaskState.DISPATCHED, LifecycleEvent.ASSIGNED): TaskState.SCHEDULED,
    (TaskState.SCHEDULED, LifecycleEvent.STARTED): TaskState.RUNNING,
    (TaskState.RUNNING, LifecycleEvent.COMPLETED): TaskState.SUCCEEDED,
    (TaskState.RUNNING, LifecycleEvent.FAILED): TaskState.FAILED,
    (TaskState.LOST_REQUEUED, LifecycleEvent.DEQUEUED): TaskState.QUEUED,
}


class IllegalTransition(Exception):
    def __init__(self, state: TaskState, event: LifecycleEvent):
        self.state = state
        self.event = event
        super().__init__("no edge for (%s, %s)" % (state.value, event.value))


def transition(state: TaskState, event: LifecycleEvent, retriable: bool = True) -> TaskState:
    """Next state for one lifecycle edge, or raise IllegalTransition."""
    if event is LifecycleEvent.LOST:
        if state in LOSABLE_STATES:
            return TaskState.LOST_REQUEUED if retriable else TaskState.FAILED
        raise IllegalTransition(state, event)
    try:
        return _EDGES[(state, event)]
    except KeyError:
        raise IllegalTransition(state, event) from None


def declared_edges(retriable: bool = True) -> Dict[Tuple[TaskState, LifecycleEvent], TaskState]:
    """The full edge set as data, for table-driven verification."""
    edges = dict(_EDGES)
    for state in LOSABLE_STATES:
        edges[(state, LifecycleEvent.LOST)] = (
            TaskState.LOST_REQUEUED if retriable else TaskState.FAILED
        )
    return edges


def advance_state(task, event: LifecycleEvent, now: float = None):
    """Apply one lifecycle edge to a TaskRecord, returning the new record.

    Records the transition timestamp and bumps the attempt counter on the
    requeue edge (the only place attempts grow).
    """
    if now is None:
        now = time.time()
    new_state = transition(task.state, event, task.retriable)
    attempt = task.attempt
    if task.state is TaskState.LOST_REQUEUED and new_state is TaskState.QUEUED:
        attempt += 1
    return dataclasses.replace(
        task,
        state=new_state,
        attempt=attempt,
        transitions=task.transitions + ((event.value, new_state.value, now),),
    )
