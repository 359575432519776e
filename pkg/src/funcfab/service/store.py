"""Durable coordinator state.

An embedded write-ahead store (sqlite in WAL mode) holds the function and
endpoint registries, task records, the per-endpoint FIFO task queues, the
result queue, and the memo cache. Everything the coordinator must not lose
across a restart lives here; recovery replays queue state from these tables.

The store is the linearization point for task state: every lifecycle
transition happens inside one lock-guarded transaction, composing only legal
edges of the core state machine.
"""

from __future__ import annotations

import dataclasses
import json
import sqlite3
import threading
import time
from typing import Iterable, List, Optional, Tuple

from funcfab.core.envelope import Envelope
from funcfab.core.lifecycle import (
    LifecycleEvent,
    TaskState,
    advance_state,
)
from funcfab.core.memo import MemoKey, memo_key
from funcfab.core.model import FunctionRecord, Runtime, TaskError, TaskRecord, TimingBreakdown

_SCHEMA = """
CREATE TABLE IF NOT EXISTS functions (
    function_id TEXT NOT NULL,
    version INTEGER NOT NULL,
    name TEXT NOT NULL,
    body BLOB NOT NULL,
    runtime TEXT NOT NULL,
    container_tag TEXT NOT NULL,
    memoize INTEGER NOT NULL,
    owner TEXT NOT NULL,
    allowed TEXT NOT NULL,
    registered_at REAL NOT NULL,
    PRIMARY KEY (function_id, version)
);
CREATE TABLE IF NOT EXISTS endpoints (
    endpoint_id TEXT PRIMARY KEY,
    name TEXT NOT NULL,
    description TEXT NOT NULL,
    owner TEXT NOT NULL,
    registered_at REAL NOT NULL,
    deleted INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS tasks (
    task_id TEXT PRIMARY KEY,
    function_id TEXT NOT NULL,
    function_version INTEGER NOT NULL,
    endpoint_id TEXT NOT NULL,
    submitter TEXT NOT NULL,
    state TEXT NOT NULL,
    retriable INTEGER NOT NULL,
    attempt INTEGER NOT NULL,
    input_codec INTEGER NOT NULL,
    input_payload BLOB NOT NULL,
    result_codec INTEGER,
    result_payload BLOB,
    error TEXT,
    transitions TEXT NOT NULL,
    created_at REAL NOT NULL,
    terminal_at REAL,
    retrieved_at REAL,
    purged INTEGER NOT NULL DEFAULT 0,
    service_time REAL NOT NULL DEFAULT 0,
    forwarder_time REAL NOT NULL DEFAULT 0,
    endpoint_time REAL NOT NULL DEFAULT 0,
    exec_time REAL NOT NULL DEFAULT 0,
    memo_hit INTEGER NOT NULL DEFAULT 0,
    batch_size INTEGER NOT NULL DEFAULT 1
);
CREATE INDEX IF NOT EXISTS idx_tasks_endpoint ON tasks (endpoint_id);
CREATE TABLE IF NOT EXISTS task_queue (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    endpoint_id TEXT NOT NULL,
    task_id TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS idx_queue_endpoint ON task_queue (endpoint_id, seq);
CREATE TABLE IF NOT EXISTS result_queue (
    task_id TEXT PRIMARY KEY,
    endpoint_id TEXT NOT NULL,
    completed_at REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS memo_cache (
    digest BLOB PRIMARY KEY,
    function_id TEXT NOT NULL,
    result_codec INTEGER NOT NULL,
    result_payload BLOB NOT NULL,
    created_at REAL NOT NULL
);
"""


def _record_from_row(row) -> TaskRecord:
    result = None
    if row["result_codec"] is not None and not row["purged"]:
        result = Envelope(row["result_codec"], row["result_payload"])
    error = None
    if row["error"]:
        error = TaskError.from_dict(json.loads(row["error"]))
    return TaskRecord(
        task_id=row["task_id"],
        function_id=row["function_id"],
        function_version=row["function_version"],
        endpoint_id=row["endpoint_id"],
        input=Envelope(row["input_codec"], row["input_payload"]),
        submitter=row["submitter"],
        state=TaskState(row["state"]),
        result=result,
        error=error,
        retriable=bool(row["retriable"]),
        attempt=row["attempt"],
        timing=TimingBreakdown(
            service_time=row["service_time"],
            forwarder_time=row["forwarder_time"],
            endpoint_time=row["endpoint_time"],
            exec_time=row["exec_time"],
        ),
        transitions=tuple(tuple(t) for t in json.loads(row["transitions"])),
        created_at=row["created_at"],
        terminal_at=row["terminal_at"],
        memo_hit=bool(row["memo_hit"]),
        batch_size=row["batch_size"],
    )


# Event sequence that fast-forwards a task from any non-terminal state to a
# terminal one, applying only declared edges.
_FORWARD_EVENTS = (
    LifecycleEvent.DEQUEUED,    # LOST_REQUEUED -> QUEUED
    LifecycleEvent.PERSISTED,   # RECEIVED -> QUEUED
    LifecycleEvent.DELIVERED,   # QUEUED -> DISPATCHED
    LifecycleEvent.ASSIGNED,    # DISPATCHED -> SCHEDULED
    LifecycleEvent.STARTED,     # SCHEDULED -> RUNNING
)


def fast_forward(record: TaskRecord, final_event: LifecycleEvent, now: float) -> TaskRecord:
    """Advance a task through remaining legal edges to a terminal state."""
    for event in _FORWARD_EVENTS:
        if record.state in (TaskState.SUCCEEDED, TaskState.FAILED):
            break
        try:
            record = advance_state(record, event, now)
        except Exception:
            continue
    return advance_state(record, final_event, now)


class DurableStore:
    """sqlite-backed store; safe for concurrent use from many threads."""

    def __init__(self, path: str):
        self.path = path
        self._lock = threading.RLock()
        self._db = sqlite3.connect(path, check_same_thread=False)
        self._db.row_factory = sqlite3.Row
        self._db.execute("PRAGMA journal_mode=WAL")
        self._db.execute("PRAGMA synchronous=NORMAL")
        with self._lock, self._db:
            self._db.executescript(_SCHEMA)

    def close(self):
        with self._lock:
            self._db.close()

    # ------------------------------------------------------------------
    # functions

    def register_function(self, record: FunctionRecord):
        with self._lock, self._db:
            self._db.execute(
                "INSERT INTO functions VALUES (?,?,?,?,?,?,?,?,?,?)",
                (
                    record.function_id,
                    record.version,
                    record.name,
                    record.body,
                    record.runtime.value,
                    record.container_tag,
                    int(record.memoize),
                    record.owner,
                    json.dumps(sorted(record.allowed_principals)),
                    record.registered_at,
                ),
            )

    def get_function(self, function_id: str, version: Optional[int] = None) -> Optional[FunctionRecord]:
        with self._lock:
            if version is None:
                row = self._db.execute(
                    "SELECT * FROM functions WHERE function_id=? ORDER BY version DESC LIMIT 1",
                    (function_id,),
                ).fetchone()
            else:
                row = self._db.execute(
                    "SELECT * FROM functions WHERE function_id=? AND version=?",
                    (function_id, version),
                ).fetchone()
        if row is None:
            return None
        return FunctionRecord(
            function_id=row["function_id"],
            name=row["name"],
            body=row["body"],
            runtime=Runtime(row["runtime"]),
            container_tag=row["container_tag"],
            memoize=bool(row["memoize"]),
            owner=row["owner"],
            allowed_principals=frozenset(json.loads(row["allowed"])),
            registered_at=row["registered_at"],
            version=row["version"],
        )

    # ------------------------------------------------------------------
    # endpoints

    def upsert_endpoint(self, endpoint_id: str, name: str, description: str, owner: str):
        with self._lock, self._db:
            self._db.execute(
                "INSERT INTO endpoints VALUES (?,?,?,?,?,0) "
                "ON CONFLICT(endpoint_id) DO UPDATE SET name=excluded.name, "
                "description=excluded.description, deleted=0",
                (endpoint_id, name, description, owner, time.time()),
            )

    def get_endpoint(self, endpoint_id: str) -> Optional[dict]:
        with self._lock:
            row = self._db.execute(
                "SELECT * FROM endpoints WHERE endpoint_id=?", (endpoint_id,)
            ).fetchone()
        return dict(row) if row else None

    def list_endpoints(self) -> List[dict]:
        with self._lock:
            rows = self._db.execute("SELECT * FROM endpoints WHERE deleted=0").fetchall()
        return [dict(r) for r in rows]

    def mark_endpoint_deleted(self, endpoint_id: str):
        with self._lock, self._db:
            self._db.execute(
                "UPDATE endpoints SET deleted=1 WHERE endpoint_id=?", (endpoint_id,)
            )

    # ------------------------------------------------------------------
    # tasks and queues

    def _write_task(self, record: TaskRecord):
        self._db.execute(
            "INSERT OR REPLACE INTO tasks VALUES "
            "(?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?)",
            (
                record.task_id,
                record.function_id,
                record.function_version,
                record.endpoint_id,
                record.submitter,
                record.state.value,
                int(record.retriable),
                record.attempt,
                record.input.codec_id,
                record.input.payload,
                record.result.codec_id if record.result else None,
                record.result.payload if record.result else None,
                json.dumps(record.error.as_dict()) if record.error else None,
                json.dumps([list(t) for t in record.transitions]),
                record.created_at,
                record.terminal_at,
                None,
                0,
                record.timing.service_time,
                record.timing.forwarder_time,
                record.timing.endpoint_time,
                record.timing.exec_time,
                int(record.memo_hit),
                record.batch_size,
            ),
        )

    def insert_tasks(self, records: Iterable[TaskRecord]):
        """Persist fresh tasks; QUEUED ones are appended to their endpoint's
        FIFO queue, terminal ones (memo hits) go straight to the result set."""
        now = time.time()
        with self._lock, self._db:
            for record in records:
                self._write_task(record)
                if record.state is TaskState.QUEUED:
                    self._db.execute(
                        "INSERT INTO task_queue (endpoint_id, task_id) VALUES (?,?)",
                        (record.endpoint_id, record.task_id),
                    )
                elif record.state is TaskState.SUCCEEDED:
                    self._db.execute(
                        "INSERT OR REPLACE INTO result_queue VALUES (?,?,?)",
                        (record.task_id, record.endpoint_id, now),
                    )

    def get_task(self, task_id: str) -> Optional[TaskRecord]:
        with self._lock:
            row = self._db.execute(
                "SELECT * FROM tasks WHERE task_id=?", (task_id,)
            ).fetchone()
        return _record_from_row(row) if row else None

    def task_rows(self, endpoint_id: Optional[str] = None, task_ids: Optional[list] = None) -> List[dict]:
        with self._lock:
            if task_ids is not None:
                marks = ",".join("?" * len(task_ids))
                rows = self._db.execute(
                    "SELECT * FROM tasks WHERE task_id IN (%s)" % marks, task_ids
                ).fetchall()
            elif endpoint_id is not None:
                rows = self._db.execute(
                    "SELECT * FROM tasks WHERE endpoint_id=?", (endpoint_id,)
                ).fetchall()
            else:
                rows = self._db.execute("SELECT * FROM tasks").fetchall()
        return [dict(r) for r in rows]

    def queue_depth(self, endpoint_id: str) -> int:
        with self._lock:
            (n,) = self._db.execute(
                "SELECT COUNT(*) FROM task_queue WHERE endpoint_id=?", (endpoint_id,)
            ).fetchone()
        return n

    def pop_for_dispatch(self, endpoint_id: str, limit: int) -> Tuple[List[TaskRecord], int]:
        """Pop up to ``limit`` queued tasks, marking them DISPATCHED.

        Tasks whose memoized result landed in the cache after they were
        queued complete right here without dispatch. Returns
        (records_to_dispatch, memo_completed_count). Queue rows whose task is
        no longer QUEUED (completed by an in-flight duplicate, requeued
        elsewhere) are dropped silently.
        """
        if limit <= 0:
            return [], 0
        now = time.time()
        dispatch: List[TaskRecord] = []
        memo_done = 0
        with self._lock, self._db:
            while len(dispatch) < limit:
                want = limit - len(dispatch)
                rows = self._db.execute(
                    "SELECT seq, task_id FROM task_queue WHERE endpoint_id=? "
                    "ORDER BY seq LIMIT ?",
                    (endpoint_id, want),
                ).fetchall()
                if not rows:
                    break
                self._db.executemany(
                    "DELETE FROM task_queue WHERE seq=?", [(r["seq"],) for r in rows]
                )
                for row in rows:
                    trow = self._db.execute(
                        "SELECT * FROM tasks WHERE task_id=?", (row["task_id"],)
                    ).fetchone()
                    if trow is None:
                        continue
                    record = _record_from_row(trow)
                    if record.state is not TaskState.QUEUED:
                        continue  # stale queue entry
                    func = self.get_function(record.function_id, record.function_version)
                    if func is not None and func.memoize:
                        cached = self.memo_get(memo_key(func.body, record.input))
                        if cached is not None:
                            done = fast_forward(record, LifecycleEvent.COMPLETED, now)
                            done = self._with_result(done, cached, now, memo_hit=True)
                            self._write_task(done)
                            self._db.execute(
                                "INSERT OR REPLACE INTO result_queue VALUES (?,?,?)",
                                (done.task_id, endpoint_id, now),
                            )
                            memo_done += 1
                            continue
                    record = advance_state(record, LifecycleEvent.DELIVERED, now)
                    self._write_task(record)
                    dispatch.append(record)
        return dispatch, memo_done

    @staticmethod
    def _with_result(record: TaskRecord, result: Envelope, now: float, memo_hit=False,
                     timing: Optional[TimingBreakdown] = None) -> TaskRecord:
        return dataclasses.replace(
            record,
            result=result,
            terminal_at=now,
            memo_hit=memo_hit or record.memo_hit,
            timing=timing or record.timing,
        )

    def mark_assigned(self, task_ids: Iterable[str]):
        """Endpoint acknowledged delivery: DISPATCHED -> SCHEDULED."""
        now = time.time()
        with self._lock, self._db:
            for task_id in task_ids:
                row = self._db.execute(
                    "SELECT * FROM tasks WHERE task_id=? AND state=?",
                    (task_id, TaskState.DISPATCHED.value),
                ).fetchone()
                if row is None:
                    continue
                record = advance_state(
                    _record_from_row(row), LifecycleEvent.ASSIGNED, now
                )
                self._db.execute(
                    "UPDATE tasks SET state=?, transitions=? WHERE task_id=?",
                    (
                        record.state.value,
                        json.dumps([list(t) for t in record.transitions]),
                        task_id,
                    ),
                )

    def complete_task(
        self,
        task_id: str,
        outcome: str,
        result: Optional[Envelope],
        error: Optional[TaskError],
        forwarder_time: float = 0.0,
        endpoint_time: float = 0.0,
        exec_time: float = 0.0,
    ) -> str:
        """Terminal result handling with first-completion-wins semantics.

        Returns one of "completed", "failed", "requeued", "duplicate",
        "unknown".
        """
        now = time.time()
        with self._lock, self._db:
            row = self._db.execute(
                "SELECT * FROM tasks WHERE task_id=?", (task_id,)
            ).fetchone()
            if row is None:
                return "unknown"
            record = _record_from_row(row)
            if record.terminal:
                return "duplicate"
            timing = TimingBreakdown(
                service_time=record.timing.service_time,
                forwarder_time=record.timing.forwarder_time + forwarder_time,
                endpoint_time=endpoint_time,
                exec_time=exec_time,
            )
            if outcome == "success":
                record = fast_forward(record, LifecycleEvent.COMPLETED, now)
                record = self._with_result(record, result, now, timing=timing)
                self._write_task(record)
                self._db.execute(
                    "INSERT OR REPLACE INTO result_queue VALUES (?,?,?)",
                    (task_id, record.endpoint_id, now),
                )
                func = self.get_function(record.function_id, record.function_version)
                if func is not None and func.memoize:
                    self._memo_put_locked(memo_key(func.body, record.input), func.function_id, result, now)
                return "completed"
            if outcome == "lost" and record.retriable:
                return self._requeue_locked(record, now)
            # outcome "error", or a lost non-retriable task
            if outcome == "lost":
                error = error or TaskError("lost", "task lost in flight and not retriable")
                record = fast_forward(record, LifecycleEvent.LOST, now)
            else:
                record = fast_forward(record, LifecycleEvent.FAILED, now)
            record = dataclasses.replace(
                record, error=error, terminal_at=now, timing=timing
            )
            self._write_task(record)
            return "failed"

    def _requeue_locked(self, record: TaskRecord, now: float) -> str:
        record = advance_state(record, LifecycleEvent.LOST, now)
        if record.state is TaskState.FAILED:
            record = dataclasses.replace(
                record,
                error=TaskError("lost", "task lost in flight and not retriable"),
                terminal_at=now,
            )
            self._write_task(record)
            return "failed"
        record = advance_state(record, LifecycleEvent.DEQUEUED, now)
        self._write_task(record)
        self._db.execute(
            "INSERT INTO task_queue (endpoint_id, task_id) VALUES (?,?)",
            (record.endpoint_id, record.task_id),
        )
        return "requeued"

    def requeue_tasks(self, task_ids: Iterable[str]) -> Tuple[int, int]:
        """Requeue lost in-flight tasks (agent link died). Retriable tasks
        re-enter their queue at the tail; others fail with a loss error.
        Returns (requeued, failed)."""
        now = time.time()
        requeued = failed = 0
        with self._lock, self._db:
            for task_id in task_ids:
                row = self._db.execute(
                    "SELECT * FROM tasks WHERE task_id=?", (task_id,)
                ).fetchone()
                if row is None:
                    continue
                record = _record_from_row(row)
                if record.terminal or record.state is TaskState.QUEUED:
                    continue
                outcome = self._requeue_locked(record, now)
                if outcome == "requeued":
                    requeued += 1
                else:
                    failed += 1
        return requeued, failed

    def recover_inflight(self) -> int:
        """Startup recovery: any task caught mid-flight when the coordinator
        went down returns to its queue (or fails if non-retriable)."""
        with self._lock:
            rows = self._db.execute(
                "SELECT task_id FROM tasks WHERE state IN (?,?,?)",
                (
                    TaskState.DISPATCHED.value,
                    TaskState.SCHEDULED.value,
                    TaskState.RUNNING.value,
                ),
            ).fetchall()
        requeued, _failed = self.requeue_tasks([r["task_id"] for r in rows])
        return requeued

    # ------------------------------------------------------------------
    # results and purging

    def mark_retrieved(self, task_id: str):
        with self._lock, self._db:
            self._db.execute(
                "UPDATE tasks SET retrieved_at=? WHERE task_id=? AND retrieved_at IS NULL",
                (time.time(), task_id),
            )

    def purge_retrieved(self, grace_s: float) -> int:
        """Drop result payloads retrieved more than ``grace_s`` ago."""
        cutoff = time.time() - grace_s
        with self._lock, self._db:
            rows = self._db.execute(
                "SELECT task_id FROM tasks WHERE purged=0 AND retrieved_at IS NOT NULL "
                "AND retrieved_at < ?",
                (cutoff,),
            ).fetchall()
            ids = [r["task_id"] for r in rows]
            self._db.executemany(
                "UPDATE tasks SET purged=1, result_payload=NULL WHERE task_id=?",
                [(i,) for i in ids],
            )
            self._db.executemany(
                "DELETE FROM result_queue WHERE task_id=?", [(i,) for i in ids]
            )
        return len(ids)

    def result_state(self, task_id: str) -> Tuple[Optional[TaskRecord], bool]:
        """(record, purged) for the result endpoint."""
        with self._lock:
            row = self._db.execute(
                "SELECT * FROM tasks WHERE task_id=?", (task_id,)
            ).fetchone()
        if row is None:
            return None, False
        return _record_from_row(row), bool(row["purged"])

    # ------------------------------------------------------------------
    # memo cache

    def memo_get(self, key: MemoKey) -> Optional[Envelope]:
        with self._lock:
            row = self._db.execute(
                "SELECT result_codec, result_payload FROM memo_cache WHERE digest=?",
                (key.digest,),
            ).fetchone()
        if row is None:
            return None
        return Envelope(row["result_codec"], row["result_payload"])

    def _memo_put_locked(self, key: MemoKey, function_id: str, result: Envelope, now: float):
        self._db.execute(
            "INSERT OR IGNORE INTO memo_cache VALUES (?,?,?,?,?)",
            (key.digest, function_id, result.codec_id, result.payload, now),
        )

    def memo_put(self, key: MemoKey, function_id: str, result: Envelope):
        with self._lock, self._db:
            self._memo_put_locked(key, function_id, result, time.time())
