"""Coordinator: registries, submission, retrieval, and forwarder lifecycle."""

from __future__ import annotations

import dataclasses
import logging
import threading
import time
from typing import Dict, Iterable, List, Optional, Tuple

from funcfab.core.batching import BatchSpec, partition
from funcfab.core.envelope import CODEC_TEXT, Envelope, serialize
from funcfab.core.lifecycle import LifecycleEvent, TaskState, advance_state
from funcfab.core.memo import memo_key
from funcfab.core.model import (
    FunctionRecord,
    Runtime,
    TaskRecord,
    TimingBreakdown,
    new_id,
)
from funcfab.service import errors
from funcfab.service.config import CoordinatorConfig
from funcfab.service.forwarder import Forwarder
from funcfab.service.store import DurableStore
from funcfab.wire import payloads

log = logging.getLogger(__name__)


class Coordinator:
    def __init__(self, cfg: CoordinatorConfig):
        self.cfg = cfg
        self.store = DurableStore(cfg.db_path)
        self.forwarders: Dict[str, Forwarder] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._purge_thread: Optional[threading.Thread] = None

    # ------------------------------------------------------------------
    # lifecycle

    def start(self):
        recovered = self.store.recover_inflight()
        if recovered:
            log.info("recovered %d in-flight tasks back into their queues", recovered)
        for record in self.store.list_endpoints():
            self._ensure_forwarder(record["endpoint_id"], record["owner"])
        self._purge_thread = threading.Thread(
            target=self._purge_loop, name="purge", daemon=True
        )
        self._purge_thread.start()

    def stop(self):
        self._stop.set()
        with self._lock:
            forwarders = list(self.forwarders.values())
        for fwd in forwarders:
            fwd.stop()
        self.store.close()

    def _purge_loop(self):
        while not self._stop.wait(self.cfg.purge_interval_s):
            try:
                n = self.store.purge_retrieved(self.cfg.purge_grace_s)
                if n:
                    log.info("purged %d retrieved results", n)
            except Exception:
                log.exception("purge cycle failed")

    # ------------------------------------------------------------------
    # auth

    def principal_for(self, token: Optional[str]) -> str:
        principal = self.cfg.tokens.get(token or "")
        if principal is None:
            raise errors.Unauthorized("missing or unknown bearer token")
        return principal

    # ------------------------------------------------------------------
    # functions

    def register_function(
        self,
        principal: str,
        name: str,
        body: bytes,
        runtime: str,
        container_tag: str = "",
        memoize: bool = False,
        allowed_principals: Iterable[str] = (),
        function_id: Optional[str] = None,
    ) -> Tuple[str, int]:
        if len(body) > self.cfg.payload_cap:
            raise errors.PayloadTooLarge(len(body), self.cfg.payload_cap)
        try:
            runtime_val = Runtime(runtime)
        except ValueError:
            raise errors.BadRequest("unknown runtime %r" % runtime) from None
        version = 1
        if function_id is not None:
            existing = self.store.get_function(function_id)
            if existing is None:
                raise errors.UnknownFunction(function_id)
            if existing.owner != principal:
                raise errors.Unauthorized("only the owner may update a function")
            version = existing.version + 1
        else:
            function_id = new_id()
        record = FunctionRecord(
            function_id=function_id,
            name=name,
            body=body,
            runtime=runtime_val,
            container_tag=container_tag,
            memoize=bool(memoize),
            owner=principal,
            allowed_principals=frozenset(allowed_principals) | {principal},
            registered_at=time.time(),
            version=version,
        )
        self.store.register_function(record)
        return function_id, version

    def get_function_record(self, function_id: str) -> FunctionRecord:
        record = self.store.get_function(function_id)
        if record is None:
            raise errors.UnknownFunction(function_id)
        return record

    # ------------------------------------------------------------------
    # endpoints

    def _ensure_forwarder(self, endpoint_id: str, owner: str) -> Forwarder:
        with self._lock:
            fwd = self.forwarders.get(endpoint_id)
            if fwd is None:
                fwd = Forwarder(endpoint_id, owner, self.store, self.cfg, self.cfg.tokens)
                fwd.start()
                self.forwarders[endpoint_id] = fwd
            return fwd

    def register_endpoint(
        self,
        principal: str,
        name: str = "",
        description: str = "",
        endpoint_id: Optional[str] = None,
    ) -> Tuple[str, str, int]:
        """Create or re-register an endpoint. Re-registration by the same id
        reuses the durable queues and returns the live forwarder address."""
        if endpoint_id is not None:
            existing = self.store.get_endpoint(endpoint_id)
            if existing is not None and existing["owner"] != principal:
                raise errors.Unauthorized("endpoint is owned by another principal")
        else:
            endpoint_id = new_id()
        self.store.upsert_endpoint(endpoint_id, name, description, principal)
        fwd = self._ensure_forwarder(endpoint_id, principal)
        return endpoint_id, fwd.address[0], fwd.address[1]

    def endpoint_info(self, endpoint_id: str) -> dict:
        record = self.store.get_endpoint(endpoint_id)
        if record is None or record["deleted"]:
            raise errors.UnknownEndpoint(endpoint_id)
        fwd = self.forwarders.get(endpoint_id)
        info = {
            "endpoint_id": endpoint_id,
            "name": record["name"],
            "description": record["description"],
            "owner": record["owner"],
            "registered_at": record["registered_at"],
        }
        if fwd is not None:
            info.update(fwd.info())
        return info

    def delete_endpoint(self, principal: str, endpoint_id: str):
        record = self.store.get_endpoint(endpoint_id)
        if record is None or record["deleted"]:
            raise errors.UnknownEndpoint(endpoint_id)
        if record["owner"] != principal:
            raise errors.Unauthorized("endpoint is owned by another principal")
        with self._lock:
            fwd = self.forwarders.pop(endpoint_id, None)
        if fwd is not None:
            fwd.stop()
        self.store.mark_endpoint_deleted(endpoint_id)

    # ------------------------------------------------------------------
    # task submission

    def _check_submit(self, principal: str, function_id: str, endpoint_id: str) -> FunctionRecord:
        func = self.store.get_function(function_id)
        if func is None:
            raise errors.UnknownFunction(function_id)
        if principal not in func.allowed_principals:
            raise errors.Unauthorized(
                "principal %r may not invoke this function" % principal
            )
        endpoint = self.store.get_endpoint(endpoint_id)
        if endpoint is None or endpoint["deleted"]:
            raise errors.UnknownEndpoint(endpoint_id)
        return func

    def _new_task(
        self,
        func: FunctionRecord,
        endpoint_id: str,
        submitter: str,
        input_env: Envelope,
        retriable: bool,
        service_t0: float,
        batch_size: int = 1,
    ) -> TaskRecord:
        now = time.time()
        task_id = new_id()
        if func.memoize:
            cached = self.store.memo_get(memo_key(func.body, input_env))
            if cached is not None:
                return TaskRecord(
                    task_id=task_id,
                    function_id=func.function_id,
                    function_version=func.version,
                    endpoint_id=endpoint_id,
                    input=input_env,
                    submitter=submitter,
                    state=TaskState.SUCCEEDED,
                    result=cached,
                    retriable=retriable,
                    timing=TimingBreakdown(
                        service_time=time.perf_counter() - service_t0
                    ),
                    created_at=now,
                    terminal_at=now,
                    memo_hit=True,
                    batch_size=batch_size,
                )
        record = TaskRecord(
            task_id=task_id,
            function_id=func.function_id,
            function_version=func.version,
            endpoint_id=endpoint_id,
            input=input_env,
            submitter=submitter,
            retriable=retriable,
            created_at=now,
            batch_size=batch_size,
        )
        record = advance_state(record, LifecycleEvent.PERSISTED, now)
        return dataclasses.replace(
            record,
            timing=TimingBreakdown(service_time=time.perf_counter() - service_t0),
        )

    def submit_task(
        self,
        principal: str,
        function_id: str,
        endpoint_id: str,
        input_env: Envelope,
        retriable: bool = True,
    ) -> str:
        t0 = time.perf_counter()
        if len(input_env.payload) > self.cfg.payload_cap:
            raise errors.PayloadTooLarge(len(input_env.payload), self.cfg.payload_cap)
        func = self._check_submit(principal, function_id, endpoint_id)
        record = self._new_task(func, endpoint_id, principal, input_env, retriable, t0)
        self.store.insert_tasks([record])
        if record.state is TaskState.QUEUED:
            fwd = self.forwarders.get(endpoint_id)
            if fwd is not None:
                fwd.notify_submitted()
        return record.task_id

    def submit_batch(
        self,
        principal: str,
        function_id: str,
        endpoint_id: str,
        inputs: Iterable[Envelope],
        spec: BatchSpec,
        retriable: bool = True,
    ) -> Tuple[List[str], List[int]]:
        """Partition ``inputs`` and submit one task per batch. Each batch
        task's input is a codec-1 list of the element envelopes; workers run
        the elements sequentially and return the result list in order."""
        t0 = time.perf_counter()
        func = self._check_submit(principal, function_id, endpoint_id)
        records = []
        sizes = []
        for batch in partition(inputs, spec):
            for env in batch:
                if len(env.payload) > self.cfg.payload_cap:
                    raise errors.PayloadTooLarge(len(env.payload), self.cfg.payload_cap)
            batch_env = serialize(
                [payloads.env_to_wire(env) for env in batch], registry=(CODEC_TEXT,)
            )
            records.append(
                self._new_task(
                    func, endpoint_id, principal, batch_env, retriable, t0,
                    batch_size=len(batch),
                )
            )
            sizes.append(len(batch))
        self.store.insert_tasks(records)
        if any(r.state is TaskState.QUEUED for r in records):
            fwd = self.forwarders.get(endpoint_id)
            if fwd is not None:
                fwd.notify_submitted()
        return [r.task_id for r in records], sizes

    # ------------------------------------------------------------------
    # status and results

    def _authorized_for_task(self, principal: str, record: TaskRecord):
        if principal == record.submitter:
            return
        func = self.store.get_function(record.function_id, record.function_version)
        if func is not None and func.owner == principal:
            return
        raise errors.Unauthorized("task belongs to another principal")

    def get_status(self, principal: str, task_id: str) -> dict:
        record = self.store.get_task(task_id)
        if record is None:
            raise errors.UnknownTask(task_id)
        self._authorized_for_task(principal, record)
        status = {
            "task_id": record.task_id,
            "state": record.state.value,
            "attempt": record.attempt,
            "retriable": record.retriable,
            "memo_hit": record.memo_hit,
            "batch_size": record.batch_size,
            "created_at": record.created_at,
            "terminal_at": record.terminal_at,
            "timing": {
                "service_time": record.timing.service_time,
                "forwarder_time": record.timing.forwarder_time,
                "endpoint_time": record.timing.endpoint_time,
                "exec_time": record.timing.exec_time,
            },
        }
        if record.error is not None:
            status["error"] = record.error.as_dict()
        return status

    def get_result(self, principal: str, task_id: str) -> Envelope:
        record, purged = self.store.result_state(task_id)
        if record is None:
            raise errors.UnknownTask(task_id)
        self._authorized_for_task(principal, record)
        if record.state is TaskState.FAILED:
            raise errors.TaskFailed(record.error.as_dict() if record.error else {})
        if record.state is not TaskState.SUCCEEDED:
            raise errors.NotReady(record.state.value)
        if purged:
            raise errors.ResultPurged(task_id)
        self.store.mark_retrieved(task_id)
        return record.result

    def export_task_rows(self, endpoint_id: Optional[str] = None,
                         task_ids: Optional[list] = None) -> List[dict]:
        import json as _json

        rows = self.store.task_rows(endpoint_id=endpoint_id, task_ids=task_ids)
        out = []
        for row in rows:
            error_type = None
            if row["error"]:
                try:
                    error_type = _json.loads(row["error"]).get("type")
                except ValueError:
                    error_type = "unknown"
            out.append(
                {
                    "task_id": row["task_id"],
                    "endpoint_id": row["endpoint_id"],
                    "function_id": row["function_id"],
                    "state": row["state"],
                    "error_type": error_type,
                    "attempt": row["attempt"],
                    "memo_hit": bool(row["memo_hit"]),
                    "batch_size": row["batch_size"],
                    "created_at": row["created_at"],
                    "terminal_at": row["terminal_at"],
                    "service_time": row["service_time"],
                    "forwarder_time": row["forwarder_time"],
                    "endpoint_time": row["endpoint_time"],
                    "exec_time": row["exec_time"],
                }
            )
        return out
