"""Endpoint agent.

One logical event loop over three inbound sources: the forwarder link, the
manager links, and timer ticks. Reader threads only enqueue events; all
scheduling state is mutated on the loop thread.

The agent registers with the coordinator over HTTP, connects to its
forwarder, provisions managers through a provider, routes tasks with the
randomized container-affinity scheduler, recovers tasks from lost managers,
scales the pool against queue depth, and relays results (buffering them
while the coordinator link is down, then re-registering with backoff).
"""

from __future__ import annotations

import json
import logging
import math
import os
import queue
import random
import socket
import sys
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Dict, Optional

import requests
import yaml

from funcfab.agent.config import AgentConfig
from funcfab.agent.providers import make_provider
from funcfab.agent.scheduler import (
    STATUS_ACTIVE,
    STATUS_LOST,
    STATUS_SUSPENDED,
    CandidateView,
    schedule,
)
from funcfab.wire import payloads
from funcfab.wire.channel import (
    FrameChannel,
    LINK_MAX_PAYLOAD,
    ZERO_CORR,
    connect,
    json_body,
)
from funcfab.wire.frames import MessageType, StreamDecoder
from funcfab.wire.heartbeat import lost_peers

log = logging.getLogger(__name__)


class AuthRejected(Exception):
    pass


@dataclass
class ManagerRecord(CandidateView):
    channel: Optional[FrameChannel] = None
    node_id: str = ""
    slots: int = 0
    last_seen: float = field(default_factory=time.time)
    outstanding: Dict[str, str] = field(default_factory=dict)  # task_id -> tag
    sent_bodies: set = field(default_factory=set)
    advert_tags: Dict[str, dict] = field(default_factory=dict)
    idle_since: Optional[float] = None
    shutting_down: bool = False


class Agent:
    def __init__(self, cfg: AgentConfig):
        self.cfg = cfg
        self.rng = random.Random(cfg.rng_seed)
        self.endpoint_id: Optional[str] = cfg.endpoint_id
        self.session_id = uuid.uuid4().hex
        self.fwd: Optional[FrameChannel] = None
        self.fwd_last_seen = 0.0
        self.managers: Dict[str, ManagerRecord] = {}
        self._by_channel: Dict[FrameChannel, str] = {}
        self.queues: Dict[str, "queue.deque"] = {}
        self.tasks: Dict[str, dict] = {}
        self.bodies: Dict[tuple, bytes] = {}
        self.outbox = []
        self.provider = make_provider(cfg.provider, cfg.rng_seed)
        self.cold_starts = []
        self.metrics = {
            "internal_requeues": 0,
            "manager_losses": 0,
            "results_relayed": 0,
            "deploys_requested": 0,
        }
        self._events: "queue.Queue" = queue.Queue()
        self._stop = threading.Event()
        self._session_wanted = threading.Event()
        self._session_wanted.set()
        self.exit_code = 0
        self._listener: Optional[socket.socket] = None
        self.manager_addr = None
        self._last_scale = 0.0
        self._metrics_path = os.path.join(cfg.workdir, "metrics.jsonl")
        self._manager_cfg_path = os.path.join(cfg.workdir, "manager.yaml")

    # ------------------------------------------------------------------
    # startup

    def run(self) -> int:
        os.makedirs(self.cfg.workdir, exist_ok=True)
        self._resolve_endpoint_id()
        self._write_manager_config()
        self._open_manager_listener()
        try:
            self._register_http()
        except AuthRejected:
            log.error("coordinator rejected our token; giving up")
            return 3
        threading.Thread(target=self._session_worker, name="fwd-session", daemon=True).start()
        threading.Thread(target=self._accept_managers, name="mgr-accept", daemon=True).start()
        for _ in range(self.provider.limits.min_blocks):
            self._submit_block()
        try:
            self._loop()
        finally:
            self._shutdown()
        return self.exit_code

    def stop(self):
        self._stop.set()
        self._events.put(("stop",))

    def _resolve_endpoint_id(self):
        state_path = os.path.join(self.cfg.workdir, "endpoint_id")
        if self.endpoint_id is None and os.path.exists(state_path):
            with open(state_path, "r", encoding="utf-8") as fp:
                self.endpoint_id = fp.read().strip() or None

    def _persist_endpoint_id(self):
        with open(os.path.join(self.cfg.workdir, "endpoint_id"), "w", encoding="utf-8") as fp:
            fp.write(self.endpoint_id or "")

    def _write_manager_config(self):
        data = {
            "heartbeat": {
                "interval": self.cfg.heartbeat.interval,
                "miss_threshold": self.cfg.heartbeat.miss_threshold,
            },
            "warm_ttl_s": self.cfg.warm_ttl_s,
            "executor_batching": self.cfg.executor_batching,
            "advert_min_interval_s": self.cfg.advert_min_interval_s,
            "worker_dir": os.path.join(self.cfg.workdir, "sandboxes"),
            "min_warm": {
                tag: policy.min_workers for tag, policy in self.cfg.tags.items()
            },
            "sandboxes": {
                tag: policy.sandbox for tag, policy in self.cfg.tags.items()
            },
            "reconnect_base_s": self.cfg.reconnect_base_s,
            "reconnect_cap_s": self.cfg.reconnect_cap_s,
        }
        with open(self._manager_cfg_path, "w", encoding="utf-8") as fp:
            yaml.safe_dump(data, fp)

    def _open_manager_listener(self):
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((self.cfg.manager_host, self.cfg.manager_port))
        self._listener.listen(16)
        self.manager_addr = self._listener.getsockname()
        log.info("listening for managers on %s:%d", *self.manager_addr)

    def _register_http(self):
        body = {"name": self.cfg.endpoint_name}
        if self.endpoint_id:
            body["endpoint_id"] = self.endpoint_id
        delay = self.cfg.reconnect_base_s
        while not self._stop.is_set():
            try:
                resp = requests.post(
                    self.cfg.coordinator_url + "/api/endpoints",
                    json=body,
                    headers={"Authorization": "Bearer " + self.cfg.token},
                    timeout=10,
                )
            except requests.RequestException as exc:
                log.warning("coordinator unreachable (%s); retrying in %.1fs", exc, delay)
                time.sleep(delay)
                delay = min(delay * 2, self.cfg.reconnect_cap_s)
                continue
            if resp.status_code == 401:
                raise AuthRejected(resp.text)
            resp.raise_for_status()
            data = resp.json()
            self.endpoint_id = data["endpoint_id"]
            self._persist_endpoint_id()
            self._fwd_addr = (data["forwarder_host"], data["forwarder_port"])
            log.info(
                "registered endpoint %s; forwarder at %s:%d",
                self.endpoint_id[:8],
                *self._fwd_addr,
            )
            return

    # ------------------------------------------------------------------
    # forwarder session

    def _session_worker(self):
        """Own the coordinator link: (re)register and reconnect with
        exponential backoff whenever the session drops."""
        delay = self.cfg.reconnect_base_s
        while not self._stop.is_set():
            self._session_wanted.wait(timeout=0.2)
            if self._stop.is_set() or not self._session_wanted.is_set():
                continue
            try:
                channel, leftover = self._establish_session()
            except AuthRejected:
                self.exit_code = 3
                log.error("forwarder rejected our registration; stopping")
                self.stop()
                return
            except Exception as exc:
                log.warning("session attempt failed (%s); retry in %.1fs", exc, delay)
                time.sleep(delay)
                delay = min(delay * 2, self.cfg.reconnect_cap_s)
                continue
            delay = self.cfg.reconnect_base_s
            self._session_wanted.clear()
            self._events.put(("fwd_up", channel, leftover))

    def _establish_session(self):
        self._register_http()
        sock = socket.create_connection(self._fwd_addr, timeout=5)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(10)
        channel = FrameChannel(sock, LINK_MAX_PAYLOAD)
        channel.send_json(
            MessageType.REGISTER_AGENT,
            payloads.register_agent(self.endpoint_id, self.cfg.token, self.session_id),
        )
        # Read the REGISTER_ACK synchronously before handing the socket to
        # the reader thread.
        decoder = StreamDecoder(LINK_MAX_PAYLOAD)
        ack = None
        leftover = []
        while ack is None:
            data = sock.recv(65536)
            if not data:
                raise ConnectionError("forwarder closed during handshake")
            for msg in decoder.feed(data):
                if ack is None:
                    if msg.msg_type is not MessageType.REGISTER_ACK:
                        continue
                    ack = json_body(msg)
                else:
                    leftover.append(msg)
        if not ack.get("ok"):
            raise AuthRejected(ack.get("error", "rejected"))
        sock.settimeout(None)
        channel.start_reader(
            on_message=lambda msg: self._events.put(("fwd", channel, msg)),
            on_close=lambda: self._events.put(("fwd_closed", channel)),
            name="fwd-read",
        )
        return channel, leftover

    # ------------------------------------------------------------------
    # manager links

    def _accept_managers(self):
        while not self._stop.is_set():
            try:
                sock, _addr = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            channel = FrameChannel(sock, LINK_MAX_PAYLOAD)
            channel.start_reader(
                on_message=lambda msg, ch=channel: self._events.put(("mgr", ch, msg)),
                on_close=lambda ch=channel: self._events.put(("mgr_closed", ch)),
                name="mgr-read",
            )

    # ------------------------------------------------------------------
    # event loop

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
                    return
                try:
                    self._handle(event)
                except Exception:
                    log.exception("agent event failed: %r", event[0])
            if time.monotonic() - last_tick >= interval:
                last_tick = time.monotonic()
                try:
                    self._tick()
                except Exception:
                    log.exception("agent tick failed")

    def _handle(self, event):
        kind = event[0]
        if kind == "fwd_up":
            _, channel, leftover = event
            if self.fwd is not None:
                self.fwd.close()
            self.fwd = channel
            self.fwd_last_seen = time.time()
            log.info("forwarder session established")
            self._flush_outbox()
            self._send_endpoint_advert()
            for msg in leftover:
                self._on_fwd_frame(channel, msg)
        elif kind == "fwd":
            self._on_fwd_frame(event[1], event[2])
        elif kind == "fwd_closed":
            if self.fwd is event[1]:
                log.warning("forwarder link lost")
                self.fwd = None
                self._session_wanted.set()
        elif kind == "mgr":
            self._on_mgr_frame(event[1], event[2])
        elif kind == "mgr_closed":
            mid = self._by_channel.pop(event[1], None)
            if mid and mid in self.managers:
                rec = self.managers[mid]
                if rec.shutting_down:
                    self.managers.pop(mid, None)
                else:
                    self._lose_manager(rec, "link closed")

    # ------------------------------------------------------------------
    # forwarder frames

    def _on_fwd_frame(self, channel: FrameChannel, msg):
        if channel is not self.fwd:
            return
        self.fwd_last_seen = time.time()
        if msg.msg_type is MessageType.TASK_DISPATCH:
            self._accept_dispatch(json_body(msg))
        elif msg.msg_type is MessageType.HEARTBEAT:
            try:
                channel.send_json(MessageType.HEARTBEAT_ACK, {})
            except Exception:
                pass

    def _accept_dispatch(self, body: dict):
        now = time.time()
        default_tag = self.cfg.default_tags[0] if self.cfg.default_tags else "default"
        accepted = []
        for task in body.get("tasks", []):
            key = (task["function_id"], task["version"])
            if "body" in task:
                self.bodies[key] = payloads.unb64(task.pop("body"))
            if key not in self.bodies:
                self._send_up(
                    payloads.task_result(
                        task["task_id"],
                        "error",
                        error={"type": "MissingBody", "message": "body never shipped"},
                    )
                )
                continue
            # empty tag means "this endpoint's default environment"
            if not task.get("container_tag"):
                task["container_tag"] = default_tag
            task["_received"] = now
            self.tasks[task["task_id"]] = task
            self.queues.setdefault(task["container_tag"], []).append(task["task_id"])
            accepted.append(task["task_id"])
        if accepted and self.fwd is not None:
            try:
                self.fwd.send_json(MessageType.TASK_ACK, payloads.task_ack(accepted))
            except Exception:
                pass
        self._pump()

    # ------------------------------------------------------------------
    # manager frames

    def _on_mgr_frame(self, channel: FrameChannel, msg):
        mid = self._by_channel.get(channel)
        if msg.msg_type is MessageType.REGISTER_MANAGER:
            self._on_manager_register(channel, json_body(msg))
            return
        if mid is None or mid not in self.managers:
            return
        rec = self.managers[mid]
        rec.last_seen = time.time()
        if msg.msg_type is MessageType.CAPACITY_ADVERT:
            self._on_advert(rec, json_body(msg))
        elif msg.msg_type is MessageType.TASK_RESULT:
            self._on_result(rec, json_body(msg))

    def _on_manager_register(self, channel: FrameChannel, body: dict):
        mid = body["manager_id"]
        rec = ManagerRecord(
            manager_id=mid,
            status=STATUS_ACTIVE,
            channel=channel,
            node_id=body.get("node_id", ""),
            slots=int(body.get("slots", self.cfg.workers_per_node)),
        )
        warm = {tag: int(n) for tag, n in (body.get("tags") or {}).items()}
        rec.deployed = dict(warm)
        rec.idle = dict(warm)
        rec.credit = dict(warm)  # pre-advert: grant the registered idle capacity
        rec.slots_free = rec.slots - sum(warm.values())
        self.managers[mid] = rec
        self._by_channel[channel] = mid
        try:
            channel.send_json(MessageType.REGISTER_ACK, payloads.register_ack(True))
        except Exception:
            return
        log.info(
            "manager %s registered: node=%s slots=%d tags=%s",
            mid[:8],
            rec.node_id,
            rec.slots,
            warm,
        )
        self._pump()
        self._send_endpoint_advert()

    def _on_advert(self, rec: ManagerRecord, body: dict):
        prefetch = self.cfg.effective_prefetch
        tags = body.get("tags", {})
        rec.advert_tags = tags
        rec.deployed = {tag: int(e.get("deployed", 0)) for tag, e in tags.items()}
        rec.idle = {tag: int(e.get("idle", 0)) for tag, e in tags.items()}
        rec.credit = {
            tag: max(0, min(int(e.get("anticipated", 0)), int(e.get("idle", 0)) + prefetch))
            for tag, e in tags.items()
        }
        rec.slots_free = int(body.get("slots_free", 0))
        rec.new_tag = None  # a new advert opens a new deployment cycle
        self.cold_starts.extend(body.get("cold_starts", []))
        busy = sum(int(e.get("busy", 0)) + int(e.get("starting", 0)) for e in tags.values())
        if busy == 0 and not rec.outstanding:
            if rec.idle_since is None:
                rec.idle_since = time.time()
        else:
            rec.idle_since = None
        self._pump()

    def _on_result(self, rec: ManagerRecord, body: dict):
        task_id = body.get("task_id", "")
        rec.outstanding.pop(task_id, None)
        entry = self.tasks.pop(task_id, None)
        outcome = body.get("outcome")
        if outcome == "lost" and entry is not None and entry.get("retriable", True):
            # recover the task inside the endpoint: back to the agent queue
            entry.pop("_manager", None)
            self.tasks[task_id] = entry
            self.queues.setdefault(entry["container_tag"], []).append(task_id)
            self.metrics["internal_requeues"] += 1
            self._pump()
            return
        if entry is not None:
            exec_time = float(body.get("exec_time", 0.0))
            body["endpoint_time"] = max(
                0.0, (time.time() - entry["_received"]) - exec_time
            )
        self.metrics["results_relayed"] += 1
        self._send_up(body)

    # ------------------------------------------------------------------
    # scheduling

    def _tag_worker_count(self, tag: str) -> int:
        return sum(
            rec.deployed.get(tag, 0)
            for rec in self.managers.values()
            if rec.status == STATUS_ACTIVE
        )

    def _pump(self):
        candidates = [r for r in self.managers.values() if r.status == STATUS_ACTIVE]
        if not candidates:
            return
        for tag in list(self.queues.keys()):
            q = self.queues.get(tag)
            if not q:
                continue
            policy = self.cfg.tags.get(tag)
            max_workers = policy.max_workers if policy else None
            sends: Dict[str, list] = {}
            while q:
                allow_deploy = (
                    max_workers is None or self._tag_worker_count(tag) < max_workers
                )
                decision = schedule(tag, candidates, self.rng, allow_deploy=allow_deploy)
                if decision is None:
                    break
                mid, deploy = decision
                rec = self.managers[mid]
                task_id = q.pop(0)
                entry = self.tasks.get(task_id)
                if entry is None:
                    continue
                out = {
                    k: v for k, v in entry.items() if not k.startswith("_")
                }
                if deploy:
                    out["deploy"] = True
                    self.metrics["deploys_requested"] += 1
                    if rec.slots_free > 0:
                        rec.slots_free -= 1
                    else:
                        # the manager will recycle an idle worker of another tag
                        for other, idle_count in rec.idle.items():
                            if other != tag and idle_count > 0:
                                rec.idle[other] = idle_count - 1
                                break
                    before = rec.deployed.get(tag, 0)
                    rec.deployed[tag] = before + 1
                    if before == 0:
                        rec.new_tag = tag
                else:
                    rec.credit[tag] = rec.credit.get(tag, 0) - 1
                key = (entry["function_id"], entry["version"])
                if key not in rec.sent_bodies:
                    out["body"] = payloads.b64(self.bodies[key])
                    rec.sent_bodies.add(key)
                entry["_manager"] = mid
                rec.outstanding[task_id] = tag
                rec.idle_since = None
                sends.setdefault(mid, []).append(out)
            for mid, outs in sends.items():
                rec = self.managers.get(mid)
                if rec is None or rec.channel is None:
                    continue
                try:
                    if self.cfg.executor_batching:
                        rec.channel.send_json(
                            MessageType.TASK_DISPATCH, payloads.dispatch_frame(outs)
                        )
                    else:
                        for out in outs:
                            rec.channel.send_json(
                                MessageType.TASK_DISPATCH, payloads.dispatch_frame([out])
                            )
                except Exception:
                    self._lose_manager(rec, "dispatch failed")

    def _lose_manager(self, rec: ManagerRecord, reason: str):
        if rec.status == STATUS_LOST:
            return
        log.warning("manager %s lost (%s)", rec.manager_id[:8], reason)
        rec.status = STATUS_LOST
        self.metrics["manager_losses"] += 1
        if rec.channel is not None:
            self._by_channel.pop(rec.channel, None)
            rec.channel.close()
        self.managers.pop(rec.manager_id, None)
        for task_id, tag in list(rec.outstanding.items()):
            entry = self.tasks.get(task_id)
            if entry is None:
                continue
            if entry.get("retriable", True):
                entry.pop("_manager", None)
                self.queues.setdefault(tag, []).append(task_id)
                self.metrics["internal_requeues"] += 1
            else:
                self.tasks.pop(task_id, None)
                self._send_up(payloads.task_result(task_id, "lost"))
        rec.outstanding.clear()
        self._pump()
        self._send_endpoint_advert()

    # ------------------------------------------------------------------
    # upstream relay

    def _send_up(self, body: dict):
        corr = ZERO_CORR
        tid = body.get("task_id")
        if tid:
            try:
                corr = bytes.fromhex(tid)
            except ValueError:
                corr = ZERO_CORR
        if self.fwd is None:
            self.outbox.append((body, corr))
            return
        try:
            self.fwd.send_json(MessageType.TASK_RESULT, body, corr)
        except Exception:
            self.outbox.append((body, corr))

    def _flush_outbox(self):
        while self.outbox and self.fwd is not None:
            body, corr = self.outbox.pop(0)
            try:
                self.fwd.send_json(MessageType.TASK_RESULT, body, corr)
            except Exception:
                self.outbox.insert(0, (body, corr))
                return

    def _window(self) -> int:
        live_slots = sum(
            r.slots for r in self.managers.values() if r.status == STATUS_ACTIVE
        )
        active = sum(1 for r in self.managers.values() if r.status == STATUS_ACTIVE)
        prefetch = self.cfg.effective_prefetch * max(1, active)
        wpn = self.cfg.workers_per_node
        limits = self.provider.limits
        provisionable = max(0, limits.max_blocks - self.provider.in_use())
        headroom = provisionable * limits.nodes_per_block * wpn
        pending_nodes = self.provider.upcoming_nodes() * wpn - live_slots
        return live_slots + prefetch + max(0, pending_nodes) + headroom

    def _send_endpoint_advert(self):
        if self.fwd is None:
            return
        try:
            self.fwd.send_json(
                MessageType.CAPACITY_ADVERT, payloads.endpoint_advert(self._window())
            )
        except Exception:
            pass

    # ------------------------------------------------------------------
    # periodic work

    def _tick(self):
        now = time.time()
        if self.fwd is not None:
            if now - self.fwd_last_seen > self.cfg.heartbeat.deadline:
                log.warning("forwarder heartbeat silence; dropping session")
                self.fwd.close()
                self.fwd = None
                self._session_wanted.set()
            else:
                try:
                    self.fwd.send_json(MessageType.HEARTBEAT, {})
                except Exception:
                    pass
                self._send_endpoint_advert()
        self._watchdog(now)
        if now - self._last_scale >= self.cfg.scaler_interval_s:
            self._last_scale = now
            try:
                self._scale(now)
            except Exception:
                log.exception("scaler cycle failed; will retry next cycle")
        for rec in list(self.managers.values()):
            if rec.channel is not None and rec.status != STATUS_LOST:
                try:
                    rec.channel.send_json(MessageType.HEARTBEAT, {})
                except Exception:
                    self._lose_manager(rec, "heartbeat send failed")
        self._write_metrics(now)

    def _watchdog(self, now: float):
        seen = {mid: rec.last_seen for mid, rec in self.managers.items()}
        for mid in lost_peers(seen, now, self.cfg.heartbeat):
            rec = self.managers.get(mid)
            if rec is not None:
                self._lose_manager(rec, "heartbeat silence")

    def _scale(self, now: float):
        self.provider.poll()
        wpn = self.cfg.workers_per_node
        limits = self.provider.limits
        pending = sum(len(q) for q in self.queues.values())
        idle = sum(
            sum(r.idle.values()) for r in self.managers.values() if r.status == STATUS_ACTIVE
        )
        live_slots = sum(
            r.slots for r in self.managers.values() if r.status == STATUS_ACTIVE
        )
        upcoming = max(0, self.provider.upcoming_nodes() * wpn - live_slots)
        deficit = pending - idle - upcoming
        if deficit > 0 and self.provider.in_use() < limits.max_blocks:
            nodes = math.ceil(deficit / wpn)
            blocks = min(
                math.ceil(nodes / limits.nodes_per_block),
                limits.max_blocks - self.provider.in_use(),
            )
            for _ in range(max(1, blocks)):
                if self.provider.in_use() >= limits.max_blocks:
                    break
                self._submit_block()
            self._send_endpoint_advert()
        # scale down idle managers beyond the floor
        floor = limits.min_blocks * limits.nodes_per_block
        active = [r for r in self.managers.values() if r.status == STATUS_ACTIVE]
        for rec in active:
            if len(self.managers) <= floor:
                break
            if (
                rec.idle_since is not None
                and now - rec.idle_since > self.cfg.idle_timeout_s
                and not rec.outstanding
            ):
                self._retire_manager(rec)

    def _retire_manager(self, rec: ManagerRecord):
        log.info("retiring idle manager %s", rec.manager_id[:8])
        rec.shutting_down = True
        rec.status = STATUS_SUSPENDED
        try:
            rec.channel.send_json(MessageType.SUSPEND_MANAGER, {})
            rec.channel.send_json(MessageType.SHUTDOWN_MANAGER, {})
        except Exception:
            pass

    def _submit_block(self):
        host, port = self.manager_addr
        wpn = self.cfg.workers_per_node
        tags = ",".join(self.cfg.default_tags)
        cfg_path = self._manager_cfg_path

        def command(node_id: str):
            return [
                sys.executable,
                "-m",
                "funcfab.node.cli",
                "--agent",
                "%s:%d" % (host, port),
                "--node-id",
                node_id,
                "--workers",
                str(wpn),
                "--tags",
                tags,
                "--config",
                cfg_path,
            ]

        self.provider.submit_block(self.provider.limits.nodes_per_block, command)

    def _write_metrics(self, now: float):
        workers: Dict[str, dict] = {}
        for rec in self.managers.values():
            if rec.status != STATUS_ACTIVE:
                continue
            for tag, entry in rec.advert_tags.items():
                agg = workers.setdefault(
                    tag, {"idle": 0, "busy": 0, "starting": 0, "deployed": 0}
                )
                for key in ("idle", "busy", "starting", "deployed"):
                    agg[key] += int(entry.get(key, 0))
        line = {
            "t": now,
            "managers": sum(
                1 for r in self.managers.values() if r.status == STATUS_ACTIVE
            ),
            "workers": workers,
            "pending": {tag: len(q) for tag, q in self.queues.items() if q},
            "outstanding": sum(len(r.outstanding) for r in self.managers.values()),
            "window": self._window(),
            "blocks_in_use": self.provider.in_use(),
            "connected": self.fwd is not None,
        }
        if self.cold_starts:
            line["cold_starts"] = self.cold_starts
            self.cold_starts = []
        line["metrics"] = dict(self.metrics)
        try:
            with open(self._metrics_path, "a", encoding="utf-8") as fp:
                fp.write(json.dumps(line) + "\n")
        except OSError:
            pass

    # ------------------------------------------------------------------

    def _shutdown(self):
        self._stop.set()
        for rec in list(self.managers.values()):
            if rec.channel is not None:
                try:
                    rec.channel.send_json(MessageType.SHUTDOWN_MANAGER, {})
                except Exception:
                    pass
        time.sleep(0.2)
        for block_id in list(self.provider.blocks):
            self.provider.cancel(block_id)
        if self.fwd is not None:
            self.fwd.close()
        if self._listener is not None:
            try:
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._listener.close()
            except OSError:
                pass
