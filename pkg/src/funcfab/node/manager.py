"""Per-node manager.

A manager partitions its node into worker slots, keeps warm pools per
container tag, and represents the collective capacity of its workers over a
single duplex link to the agent. It advertises capacity once per heartbeat
interval (or immediately when a tag's idle count rises from zero), accepts
multi-task dispatch frames, fans tasks out to idle workers of the matching
tag, and relays each result in its own frame as it completes.
"""

from __future__ import annotations

import enum
import json
import logging
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from funcfab.core.envelope import Envelope
from funcfab.node.sandbox import LaunchFailure, SandboxSpec, launch_worker
from funcfab.wire import payloads
from funcfab.wire.channel import (
    FrameChannel,
    LINK_MAX_PAYLOAD,
    ZERO_CORR,
    connect,
    json_body,
    json_env,
    read_pipe_frames,
)
from funcfab.wire.frames import MessageType, encode_frame
from funcfab.wire.heartbeat import HeartbeatConfig

log = logging.getLogger(__name__)


class WorkerState(str, enum.Enum):
    STARTING = "STARTING"
    IDLE = "IDLE"
    BUSY = "BUSY"
    DRAINING = "DRAINING"
    DEAD = "DEAD"


@dataclass
class WorkerSlot:
    worker_id: str
    tag: str
    proc: object
    state: WorkerState = WorkerState.STARTING
    warm_since: float = field(default_factory=time.time)
    deployed_at: float = field(default_factory=time.time)
    current_task: Optional[str] = None


@dataclass
class ManagerConfig:
    agent_host: str
    agent_port: int
    node_id: str
    slots: int
    default_tags: List[str]
    sandbox_specs: Dict[str, SandboxSpec]
    heartbeat: HeartbeatConfig = field(default_factory=HeartbeatConfig)
    warm_ttl_s: float = 300.0
    min_warm: Dict[str, int] = field(default_factory=dict)
    executor_batching: bool = True
    advert_min_interval_s: float = 0.0
    worker_dir: str = "workers"
    reconnect_base_s: float = 1.0
    reconnect_cap_s: float = 30.0
    reconnect_deadline_s: float = 60.0

    @classmethod
    def from_dict(cls, data: dict, agent_host: str, agent_port: int, node_id: str,
                  slots: int, tags: List[str]) -> "ManagerConfig":
        hb = data.get("heartbeat", {})
        specs = {
            tag: SandboxSpec.from_dict(tag, spec)
            for tag, spec in (data.get("sandboxes") or {}).items()
        }
        for tag in tags:
            specs.setdefault(tag, SandboxSpec(tag))
        return cls(
            agent_host=agent_host,
            agent_port=agent_port,
            node_id=node_id,
            slots=slots,
            default_tags=tags,
            sandbox_specs=specs,
            heartbeat=HeartbeatConfig(
                interval=float(hb.get("interval", 1.0)),
                miss_threshold=int(hb.get("miss_threshold", 3)),
            ),
            warm_ttl_s=float(data.get("warm_ttl_s", 300.0)),
            min_warm={k: int(v) for k, v in (data.get("min_warm") or {}).items()},
            executor_batching=bool(data.get("executor_batching", True)),
            advert_min_interval_s=float(data.get("advert_min_interval_s", 0.0)),
            worker_dir=data.get("worker_dir", "workers"),
            reconnect_base_s=float(data.get("reconnect_base_s", 1.0)),
            reconnect_cap_s=float(data.get("reconnect_cap_s", 30.0)),
            reconnect_deadline_s=float(data.get("reconnect_deadline_s", 60.0)),
        )


class Manager:
    def __init__(self, cfg: ManagerConfig):
        self.cfg = cfg
        self.manager_id = uuid.uuid4().hex
        self.workers: Dict[str, WorkerSlot] = {}
        self.backlog: Dict[str, list] = {}  # tag -> queued task dicts
        self.bodies: Dict[tuple, bytes] = {}  # (function_id, version) -> body
        self.channel: Optional[FrameChannel] = None
        self.suspended = False
        self.agent_last_seen = time.time()
        self.cold_starts: List[float] = []
        self.max_backlog_seen = 0
        self._last_advert = 0.0
        self._events: "queue.Queue" = queue.Queue()
        self._stop = threading.Event()
        self.deploy_count = 0

    # ------------------------------------------------------------------
    # wiring

    def start(self):
        """Launch default-tag workers, wait for them, register, and serve."""
        for tag in self.cfg.default_tags:
            per_tag = self.cfg.slots // max(1, len(self.cfg.default_tags))
            for _ in range(per_tag):
                try:
                    self.deploy_worker(tag)
                except LaunchFailure:
                    log.exception("initial worker for tag %r failed", tag)
        deadline = time.time() + 30.0
        while (
            not self._stop.is_set()
            and time.time() < deadline
            and any(w.state is WorkerState.STARTING for w in self.workers.values())
        ):
            self._drain_events(0.05)
        if self._stop.is_set():
            self._terminate_workers()
            return
        self._connect_and_register()
        self._loop()

    def stop(self):
        self._stop.set()
        self._events.put(("stop",))
        if self.channel is not None:
            self.channel.close()

    def _connect_and_register(self):
        delay = self.cfg.reconnect_base_s
        deadline = time.time() + self.cfg.reconnect_deadline_s
        while not self._stop.is_set():
            try:
                self.channel = connect(
                    self.cfg.agent_host, self.cfg.agent_port, max_payload=LINK_MAX_PAYLOAD
                )
                self.channel.start_reader(
                    on_message=lambda msg: self._events.put(("agent", msg)),
                    on_close=lambda: self._events.put(("agent_closed",)),
                    name="mgr-agent-read",
                )
                tags = {}
                for worker in self.workers.values():
                    if worker.state in (WorkerState.IDLE, WorkerState.BUSY, WorkerState.STARTING):
                        tags[worker.tag] = tags.get(worker.tag, 0) + 1
                self.channel.send_json(
                    MessageType.REGISTER_MANAGER,
                    payloads.register_manager(
                        self.manager_id, self.cfg.node_id, self.cfg.slots, tags
                    ),
                )
                self.agent_last_seen = time.time()
                log.info(
                    "manager %s registered with agent (%d workers)",
                    self.manager_id[:8],
                    len(self.workers),
                )
                return
            except OSError:
                if time.time() + delay > deadline:
                    log.error("agent unreachable beyond deadline; exiting")
                    self._stop.set()
                    return
                time.sleep(delay)
                delay = min(delay * 2, self.cfg.reconnect_cap_s)

    # ------------------------------------------------------------------
    # event loop

    def _drain_events(self, timeout: float):
        try:
            event = self._events.get(timeout=timeout)
        except queue.Empty:
            return
        self._handle(event)

    def _loop(self):
        interval = self.cfg.heartbeat.interval
        last_tick = time.monotonic()
        while not self._stop.is_set():
            timeout = max(0.005, interval - (time.monotonic() - last_tick))
            try:
                event = self._events.get(timeout=timeout)
            except queue.Empty:
                event = None
            if event is not None:
                if event[0] == "stop":
                    break
                try:
                    self._handle(event)
                except Exception:
                    log.exception("manager event failed: %r", event[0])
            if time.monotonic() - last_tick >= interval:
                last_tick = time.monotonic()
                self._tick()
        self._terminate_workers()

    def _handle(self, event):
        kind = event[0]
        if kind == "agent":
            self._on_agent_frame(event[1])
        elif kind == "agent_closed":
            self._on_agent_lost()
        elif kind == "worker":
            self._on_worker_frame(event[1], event[2])
        elif kind == "worker_dead":
            self._on_worker_dead(event[1])

    def _tick(self):
        if self.channel is not None and not self.channel.closed:
            now = time.time()
            if now - self.agent_last_seen > self.cfg.heartbeat.deadline:
                self._on_agent_lost()
                return
            try:
                self.channel.send_json(MessageType.HEARTBEAT, {})
            except Exception:
                self._on_agent_lost()
                return
            self._send_advert()
        self.reap_warm()
        self._deploy_for_backlog()

    def _on_agent_lost(self):
        if self._stop.is_set():
            return
        if self.channel is not None:
            self.channel.close()
            self.channel = None
        log.warning("agent link lost; reconnecting")
        self._connect_and_register()

    # ------------------------------------------------------------------
    # adverts

    def _capacity(self) -> dict:
        tags: Dict[str, dict] = {}
        for worker in self.workers.values():
            if worker.state is WorkerState.DEAD:
                continue
            entry = tags.setdefault(
                worker.tag, {"idle": 0, "busy": 0, "starting": 0, "deployed": 0}
            )
            entry["deployed"] += 1
            if worker.state is WorkerState.IDLE:
                entry["idle"] += 1
            elif worker.state is WorkerState.BUSY:
                entry["busy"] += 1
            elif worker.state is WorkerState.STARTING:
                entry["starting"] += 1
        for tag, entry in tags.items():
            backlog = len(self.backlog.get(tag, ()))
            # Anticipated capacity: current idle plus everything expected to
            # free up within roughly one heartbeat, net of work already
            # queued here.
            anticipated = entry["idle"] + entry["busy"] + entry["starting"] - backlog
            entry["anticipated"] = max(entry["idle"], anticipated)
            if self.suspended:
                entry["idle"] = 0
                entry["anticipated"] = 0
            elif not self.cfg.executor_batching:
                # Batching disabled: advertise capacity for one task at a
                # time, the degenerate single-task advert mode.
                entry["idle"] = min(entry["idle"], 1)
                entry["anticipated"] = min(entry["anticipated"], 1)
        return tags

    def _send_advert(self):
        if self.channel is None or self.channel.closed:
            return
        self._last_advert = time.monotonic()
        live = sum(1 for w in self.workers.values() if w.state is not WorkerState.DEAD)
        advert = payloads.manager_advert(
            self.manager_id, self._capacity(), self.cfg.slots - live
        )
        if self.cold_starts:
            advert["cold_starts"] = self.cold_starts
            self.cold_starts = []
        try:
            self.channel.send_json(MessageType.CAPACITY_ADVERT, advert)
        except Exception:
            self._on_agent_lost()

    def _maybe_edge_advert(self):
        """Advertise immediately when workers are starving: a tag has idle
        workers and nothing queued for them. This keeps the dispatch pipeline
        saturated between heartbeat adverts; under prefetch the backlog
        covers idle workers and no extra traffic is generated. With executor
        batching disabled, capacity is only ever advertised one task at a
        time on the heartbeat cadence."""
        if not self.cfg.executor_batching or self.suspended:
            return
        if (
            self.cfg.advert_min_interval_s > 0
            and time.monotonic() - self._last_advert < self.cfg.advert_min_interval_s
        ):
            # rate-limited: the cadence advert covers this capacity instead
            return
        counts: Dict[str, int] = {}
        for worker in self.workers.values():
            if worker.state is WorkerState.IDLE:
                counts[worker.tag] = counts.get(worker.tag, 0) + 1
        starving = any(
            count > 0 and not self.backlog.get(tag)
            for tag, count in counts.items()
        )
        if starving:
            self._send_advert()

    # ------------------------------------------------------------------
    # workers

    def deploy_worker(self, tag: str) -> WorkerSlot:
        spec = self.cfg.sandbox_specs.get(tag)
        if spec is None:
            raise LaunchFailure("UnknownTag", tag)
        live = sum(1 for w in self.workers.values() if w.state is not WorkerState.DEAD)
        if live >= self.cfg.slots and not self._recycle_idle_slot(tag):
            raise LaunchFailure("NoSlot", "all %d slots occupied" % self.cfg.slots)
        worker_id = uuid.uuid4().hex[:12]
        proc = launch_worker(spec, worker_id, self.cfg.worker_dir)
        slot = WorkerSlot(worker_id=worker_id, tag=tag, proc=proc)
        self.workers[worker_id] = slot
        self.deploy_count += 1
        threading.Thread(
            target=self._worker_reader,
            args=(slot,),
            name="worker-read-%s" % worker_id[:6],
            daemon=True,
        ).start()
        return slot

    def _recycle_idle_slot(self, wanted_tag: str) -> bool:
        """Free a slot for ``wanted_tag`` by retiring the stalest idle worker
        of another tag. Busy and starting workers are never preempted, and a
        tag is never recycled below its warm floor."""
        counts: Dict[str, int] = {}
        for worker in self.workers.values():
            if worker.state in (WorkerState.IDLE, WorkerState.BUSY, WorkerState.STARTING):
                counts[worker.tag] = counts.get(worker.tag, 0) + 1
        victims = [
            w
            for w in self.workers.values()
            if w.state is WorkerState.IDLE
            and w.tag != wanted_tag
            and counts.get(w.tag, 0) > self.cfg.min_warm.get(w.tag, 0)
        ]
        if not victims:
            return False
        victim = min(victims, key=lambda w: w.warm_since)
        self._shutdown_worker(victim)
        victim.state = WorkerState.DEAD
        self.workers.pop(victim.worker_id, None)
        try:
            victim.proc.kill()
        except Exception:
            pass
        log.info("recycled idle %s worker %s for tag %s",
                 victim.tag, victim.worker_id[:6], wanted_tag)
        return True

    def _worker_reader(self, slot: WorkerSlot):
        try:
            for msg in read_pipe_frames(slot.proc.stdout):
                self._events.put(("worker", slot.worker_id, msg))
        except Exception:
            pass
        self._events.put(("worker_dead", slot.worker_id))

    def _on_worker_frame(self, worker_id: str, msg):
        slot = self.workers.get(worker_id)
        if slot is None:
            return
        if msg.msg_type is MessageType.HEARTBEAT:
            body = json_body(msg)
            if body.get("event") == "hello" and slot.state is WorkerState.STARTING:
                slot.state = WorkerState.IDLE
                slot.warm_since = time.time()
                self.cold_starts.append(time.time() - slot.deployed_at)
                self._pump_tag(slot.tag)
                self._maybe_edge_advert()
        elif msg.msg_type is MessageType.TASK_RESULT:
            slot.state = WorkerState.IDLE
            slot.warm_since = time.time()
            slot.current_task = None
            self._relay_result(json_body(msg))
            self._pump_tag(slot.tag)
            self._maybe_edge_advert()

    def _on_worker_dead(self, worker_id: str):
        slot = self.workers.get(worker_id)
        if slot is None or slot.state is WorkerState.DEAD:
            return
        was_draining = slot.state is WorkerState.DRAINING
        task_id = slot.current_task
        slot.state = WorkerState.DEAD
        slot.current_task = None
        try:
            slot.proc.kill()
        except Exception:
            pass
        self.workers.pop(worker_id, None)
        if task_id is not None:
            # exactly one loss report per task held by a dying worker
            self._send_up(
                MessageType.TASK_RESULT,
                payloads.task_result(task_id, "lost"),
                bytes.fromhex(task_id),
            )
        if not was_draining:
            log.warning("worker %s (tag %s) died", worker_id[:6], slot.tag)




    def reap_warm(self):
        """Terminate idle workers past the warm TTL, honoring per-tag mins."""
        now = time.time()
        idle_by_tag: Dict[str, List[WorkerSlot]] = {}
        for worker in self.workers.values():
            if worker.state is WorkerState.IDLE:
                idle_by_tag.setdefault(worker.tag, []).append(worker)
        reaped = []
        for tag, idlers in idle_by_tag.items():
            floor = self.cfg.min_warm.get(tag, 0)
            keep = sum(
                1
                for w in self.workers.values()
                if w.tag == tag and w.state in (WorkerState.IDLE, WorkerState.BUSY, WorkerState.STARTING)
            )
            idlers.sort(key=lambda w: w.warm_since)
            for worker in idlers:
                if keep <= floor:
                    break
                if now - worker.warm_since > self.cfg.warm_ttl_s:
                    self._shutdown_worker(worker)
                    reaped.append(worker.worker_id)
                    keep -= 1
        return reaped

    def _shutdown_worker(self, slot: WorkerSlot):
        slot.state = WorkerState.DRAINING
        try:
            slot.proc.stdin.write(
                encode_frame(
                    MessageType.SHUTDOWN_MANAGER, ZERO_CORR, json_env({}), LINK_MAX_PAYLOAD
                )
            )
            slot.proc.stdin.flush()
        except Exception:
            try:
                slot.proc.kill()
            except Exception:
                pass

    def _terminate_workers(self):
        for slot in list(self.workers.values()):
            try:
                slot.proc.kill()
            except Exception:
                pass

    # ------------------------------------------------------------------
    # dispatch path

    def _on_agent_frame(self, msg):
        self.agent_last_seen = time.time()
        if msg.msg_type is MessageType.TASK_DISPATCH:
            body = json_body(msg)
            for task in body.get("tasks", []):
                self._accept_task(task)
            self._maybe_edge_advert()
        elif msg.msg_type is MessageType.SUSPEND_MANAGER:
            self.suspended = True
            self._send_advert()
        elif msg.msg_type is MessageType.SHUTDOWN_MANAGER:
            log.info("manager %s shutting down on request", self.manager_id[:8])
            self._report_backlog_lost()
            self.stop()
        elif msg.msg_type is MessageType.HEARTBEAT:
            pass  # liveness already refreshed

    def _accept_task(self, task: dict):
        key = (task["function_id"], task["version"])
        if "body" in task:
            self.bodies[key] = payloads.unb64(task["body"])
        if key not in self.bodies:
            self._send_up(
                MessageType.TASK_RESULT,
                payloads.task_result(
                    task["task_id"],
                    "error",
                    error={"type": "MissingBody", "message": "no cached body for %s" % (key,)},
                ),
                bytes.fromhex(task["task_id"]),
            )
            return
        tag = task["container_tag"]
        if task.get("deploy") and self._idle_worker(tag) is None:
            # The agent routed this task expecting an on-demand deployment.
            try:
                self.deploy_worker(tag)
            except LaunchFailure as exc:
                if exc.reason == "UnknownTag":
                    self._send_up(
                        MessageType.TASK_RESULT,
                        payloads.task_result(
                            task["task_id"],
                            "error",
                            error={"type": "LaunchFailure", "message": str(exc)},
                        ),
                        bytes.fromhex(task["task_id"]),
                    )
                    return
                # Out of slots: fall through, the task waits for a worker.
        backlog = self.backlog.setdefault(tag, [])
        backlog.append(task)
        self.max_backlog_seen = max(self.max_backlog_seen, len(backlog))
        self._pump_tag(tag)

    def _pump_tag(self, tag: str):
        backlog = self.backlog.get(tag)
        if not backlog:
            return
        while backlog:
            worker = self._idle_worker(tag)
            if worker is None:
                break
            task = backlog.pop(0)
            self._assign(worker, task)
        if backlog:
            self._deploy_for_backlog(tag)

    def _deploy_for_backlog(self, only_tag: Optional[str] = None):
        """On-demand deployment for starved backlogs: a queued tag with no
        live worker gets one as soon as a slot frees up. Unknown tags can
        never run; their queued tasks fail out."""
        if self.suspended:
            return
        for tag, backlog in list(self.backlog.items()):
            if not backlog or (only_tag is not None and tag != only_tag):
                continue
            deployed = any(
                w.tag == tag
                and w.state in (WorkerState.IDLE, WorkerState.BUSY, WorkerState.STARTING)
                for w in self.workers.values()
            )
            if deployed:
                continue
            try:
                self.deploy_worker(tag)
            except LaunchFailure as exc:
                if exc.reason != "UnknownTag":
                    continue  # NoSlot is transient; wait for the reaper
                for task in backlog:
                    self._send_up(
                        MessageType.TASK_RESULT,
                        payloads.task_result(
                            task["task_id"],
                            "error",
                            error={"type": "LaunchFailure", "message": str(exc)},
                        ),
                        bytes.fromhex(task["task_id"]),
                    )
                backlog.clear()

    def _idle_worker(self, tag: str) -> Optional[WorkerSlot]:
        for worker in self.workers.values():
            if worker.tag == tag and worker.state is WorkerState.IDLE:
                return worker
        return None

    def _assign(self, worker: WorkerSlot, task: dict):
        key = (task["function_id"], task["version"])
        payload = dict(task)
        payload["body"] = payloads.b64(self.bodies[key])
        worker.state = WorkerState.BUSY
        worker.current_task = task["task_id"]
        try:
            worker.proc.stdin.write(
                encode_frame(
                    MessageType.TASK_DISPATCH,
                    bytes.fromhex(task["task_id"]),
                    json_env(payload),
                    LINK_MAX_PAYLOAD,
                )
            )
            worker.proc.stdin.flush()
        except Exception:
            worker.state = WorkerState.DEAD
            worker.current_task = None
            self._send_up(
                MessageType.TASK_RESULT,
                payloads.task_result(task["task_id"], "lost"),
                bytes.fromhex(task["task_id"]),
            )

    def _relay_result(self, body: dict):
        self._send_up(
            MessageType.TASK_RESULT, body, bytes.fromhex(body.get("task_id", "00" * 16))
        )

    def _report_backlog_lost(self):
        for tag, backlog in self.backlog.items():
            for task in backlog:
                self._send_up(
                    MessageType.TASK_RESULT,
                    payloads.task_result(task["task_id"], "lost"),
                    bytes.fromhex(task["task_id"]),
                )
            backlog.clear()
        for worker in self.workers.values():
            if worker.current_task:
                self._send_up(
                    MessageType.TASK_RESULT,
                    payloads.task_result(worker.current_task, "lost"),
                    bytes.fromhex(worker.current_task),
                )
                worker.current_task = None

    def _send_up(self, msg_type: MessageType, body: dict, corr: bytes = ZERO_CORR):
        if self.channel is None or self.channel.closed:
            return
        try:
            self.channel.send_json(msg_type, body, corr)
        except Exception:
            self._on_agent_lost()
