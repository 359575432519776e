"""Per-endpoint forwarder.

Each registered endpoint gets exactly one forwarder: a listener on its own
port bridging the endpoint's durable queues and the agent link. The
forwarder dispatches only while an agent session is live, keeps at most the
advertised window in flight, and returns outstanding tasks to the queue when
the agent is lost (heartbeat silence or socket death), giving the fabric its
at-least-once delivery.

All state mutations run on one event-loop thread; reader and accept threads
only enqueue events.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from typing import Dict, Optional

from funcfab.core.envelope import Envelope
from funcfab.core.model import TaskError
from funcfab.service.config import CoordinatorConfig
from funcfab.service.store import DurableStore
from funcfab.wire import payloads
from funcfab.wire.channel import FrameChannel, json_body
from funcfab.wire.frames import Message, MessageType
from funcfab.wire.heartbeat import lost_peers

log = logging.getLogger(__name__)

STATE_REGISTERED = "REGISTERED"
STATE_CONNECTED = "CONNECTED"
STATE_DISCONNECTED = "DISCONNECTED"


class ForwarderMetrics:
    """Lifetime counters; kept in memory and exposed over the API."""

    def __init__(self):
        self.lock = threading.Lock()
        self.dispatched = 0
        self.results = 0
        self.duplicates_discarded = 0
        self.requeued = 0
        self.failed = 0
        self.memo_completions = 0

    def bump(self, name: str, n: int = 1):
        with self.lock:
            setattr(self, name, getattr(self, name) + n)

    def snapshot(self) -> dict:
        with self.lock:
            return {
                "dispatched": self.dispatched,
                "results": self.results,
                "duplicates_discarded": self.duplicates_discarded,
                "requeued": self.requeued,
                "failed": self.failed,
                "memo_completions": self.memo_completions,
            }


class _Session:
    def __init__(self, channel: FrameChannel, session_id: str):
        self.channel = channel
        self.session_id = session_id
        self.last_seen = time.time()
        self.sent_bodies = set()  # (function_id, version) already shipped


class Forwarder:
    def __init__(self, endpoint_id: str, owner: str, store: DurableStore,
                 cfg: CoordinatorConfig, tokens: Dict[str, str]):
        self.endpoint_id = endpoint_id
        self.owner = owner
        self.store = store
        self.cfg = cfg
        self.tokens = tokens
        self.metrics = ForwarderMetrics()
        self.state = STATE_REGISTERED
        self.last_heartbeat: Optional[float] = None
        self.window = 0
        self.in_flight: Dict[str, tuple] = {}  # task_id -> (ts, dispatch_span)
        self.session: Optional[_Session] = None
        self._events: "queue.Queue" = queue.Queue()
        self._stop = threading.Event()
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((cfg.forwarder_host, 0))
        self._listener.listen(4)
        self.address = self._listener.getsockname()
        self._threads = []

    # ------------------------------------------------------------------

    def start(self):
        for target, name in (
            (self._accept_loop, "fwd-accept"),
            (self._event_loop, "fwd-loop"),
        ):
            t = threading.Thread(
                target=target, name="%s-%s" % (name, self.endpoint_id[:8]), daemon=True
            )
            t.start()
            self._threads.append(t)

    def stop(self):
        self._stop.set()
        # shutdown() wakes the thread blocked in accept(); close() alone
        # leaves it parked on a dead (and soon recycled) descriptor
        try:
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._listener.close()
        except OSError:
            pass
        self._events.put(("stop",))
        if self.session:
            self.session.channel.close()

    def notify_submitted(self):
        self._events.put(("submitted",))

    # ------------------------------------------------------------------

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                sock, _addr = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            channel = FrameChannel(sock, self.cfg.link_frame_cap)
            channel.start_reader(
                on_message=lambda msg, ch=channel: self._events.put(("msg", ch, msg)),
                on_close=lambda ch=channel: self._events.put(("closed", ch)),
                name="fwd-read-%s" % self.endpoint_id[:8],
            )

    def _event_loop(self):
        tick = self.cfg.heartbeat.interval
        last_tick = time.monotonic()
        while not self._stop.is_set():
            timeout = max(0.01, tick - (time.monotonic() - last_tick))
            try:
                event = self._events.get(timeout=timeout)
            except queue.Empty:
                event = ("tick",)
            if event[0] == "stop":
                return
            try:
                self._handle(event)
            except Exception:
                log.exception("forwarder %s event failed", self.endpoint_id[:8])
            if time.monotonic() - last_tick >= tick:
                last_tick = time.monotonic()
                self._on_tick()

    def _handle(self, event):
        kind = event[0]
        if kind == "msg":
            _, channel, msg = event
            self._on_message(channel, msg)
        elif kind == "closed":
            _, channel = event
            if self.session and self.session.channel is channel:
                self._disconnect("link closed")
        elif kind == "submitted":
            self._pump()
        elif kind == "tick":
            pass  # handled by the loop cadence below

    # ------------------------------------------------------------------

    def _on_message(self, channel: FrameChannel, msg: Message):
        if self.session and channel is self.session.channel:
            self.session.last_seen = time.time()
            self.last_heartbeat = self.session.last_seen
        if msg.msg_type is MessageType.REGISTER_AGENT:
            self._on_register(channel, msg)
        elif self.session is None or channel is not self.session.channel:
            channel.close()  # frames from unregistered links are dropped
        elif msg.msg_type is MessageType.HEARTBEAT:
            try:
                channel.send_json(MessageType.HEARTBEAT_ACK, {})
            except Exception:
                pass
        elif msg.msg_type is MessageType.CAPACITY_ADVERT:
            body = json_body(msg)
            self.window = max(0, int(body.get("window", 0)))
            self._pump()
        elif msg.msg_type is MessageType.TASK_ACK:
            body = json_body(msg)
            self.store.mark_assigned(body.get("task_ids", []))
        elif msg.msg_type is MessageType.TASK_RESULT:
            self._on_result(json_body(msg))

    def _on_register(self, channel: FrameChannel, msg: Message):
        body = json_body(msg)
        token = body.get("token", "")
        principal = self.tokens.get(token)
        if principal is None or principal != self.owner or body.get("endpoint_id") != self.endpoint_id:
            try:
                channel.send_json(
                    MessageType.REGISTER_ACK,
                    payloads.register_ack(False, error="AuthRejected"),
                )
            except Exception:
                pass
            channel.close()
            return
        if self.session is not None:
            # A replacement agent owns the endpoint now; anything the old
            # session held is re-delivered to preserve at-least-once.
            old = self.session
            self.session = None
            old.channel.close()
            self._requeue_in_flight()
        self.session = _Session(channel, body.get("session_id", ""))
        self.state = STATE_CONNECTED
        self.last_heartbeat = time.time()
        self.window = 0
        channel.send_json(
            MessageType.REGISTER_ACK,
            payloads.register_ack(
                True,
                session_id=self.session.session_id,
                heartbeat_interval=self.cfg.heartbeat.interval,
                miss_threshold=self.cfg.heartbeat.miss_threshold,
            ),
        )
        log.info("endpoint %s agent connected", self.endpoint_id[:8])

    def _on_result(self, body: dict):
        task_id = body.get("task_id", "")
        recv = time.perf_counter()
        entry = self.in_flight.pop(task_id, None)
        dispatch_span = entry[1] if entry else 0.0
        result = payloads.env_from_wire(body["result"]) if "result" in body else None
        error = TaskError.from_dict(body["error"]) if body.get("error") else None
        outcome = self.store.complete_task(
            task_id,
            body.get("outcome", "error"),
            result,
            error,
            forwarder_time=dispatch_span + (time.perf_counter() - recv),
            endpoint_time=float(body.get("endpoint_time", 0.0)),
            exec_time=float(body.get("exec_time", 0.0)),
        )
        if outcome == "duplicate":
            self.metrics.bump("duplicates_discarded")
        elif outcome == "completed":
            self.metrics.bump("results")
        elif outcome == "failed":
            self.metrics.bump("failed")
        elif outcome == "requeued":
            self.metrics.bump("requeued")
        self._pump()

    # ------------------------------------------------------------------

    def _on_tick(self):
        if self.session is not None:
            stale = lost_peers(
                {"agent": self.session.last_seen}, time.time(), self.cfg.heartbeat
            )
            if stale:
                self._disconnect("heartbeat silence")
                return
            try:
                self.session.channel.send_json(MessageType.HEARTBEAT, {})
            except Exception:
                self._disconnect("heartbeat send failed")
                return
            self._pump()

    def _disconnect(self, reason: str):
        log.info("endpoint %s agent lost: %s", self.endpoint_id[:8], reason)
        if self.session is not None:
            self.session.channel.close()
            self.session = None
        self.state = STATE_DISCONNECTED
        self.window = 0
        self._requeue_in_flight()

    def _requeue_in_flight(self):
        if not self.in_flight:
            return
        ids = list(self.in_flight.keys())
        self.in_flight.clear()
        requeued, failed = self.store.requeue_tasks(ids)
        self.metrics.bump("requeued", requeued)
        self.metrics.bump("failed", failed)

    def _pump(self):
        """Dispatch queued tasks up to the advertised window."""
        if self.session is None or self.state != STATE_CONNECTED:
            return
        while len(self.in_flight) < self.window:
            budget = min(self.cfg.dispatch_chunk, self.window - len(self.in_flight))
            t0 = time.perf_counter()
            records, memo_done = self.store.pop_for_dispatch(self.endpoint_id, budget)
            if memo_done:
                self.metrics.bump("memo_completions", memo_done)
                self.metrics.bump("results", memo_done)
            if not records:
                if memo_done:
                    continue  # the pop drained memo hits; keep pulling
                return
            # Pack tasks into frames, splitting whenever the accumulated
            # base64 payload would approach the link frame cap.
            byte_budget = self.cfg.link_frame_cap // 2
            chunks, entries, acc = [], [], 0
            for record in records:
                func = self.store.get_function(record.function_id, record.function_version)
                body = None
                key = (record.function_id, record.function_version)
                if key not in self.session.sent_bodies:
                    body = func.body
                    self.session.sent_bodies.add(key)
                size = len(record.input.payload) * 2 + (len(body) * 2 if body else 0) + 512
                if entries and acc + size > byte_budget:
                    chunks.append(entries)
                    entries, acc = [], 0
                acc += size
                entries.append(
                    payloads.dispatch_task(
                        record.task_id,
                        record.function_id,
                        record.function_version,
                        func.runtime.value,
                        func.container_tag,
                        record.retriable,
                        record.attempt,
                        record.batch_size > 1,
                        record.input,
                        body=body,
                    )
                )
            if entries:
                chunks.append(entries)
            try:
                for chunk in chunks:
                    self.session.channel.send_json(
                        MessageType.TASK_DISPATCH, payloads.dispatch_frame(chunk)
                    )
            except Exception:
                # The send failed; these tasks are recorded in flight so the
                # disconnect path requeues every one of them.
                for record in records:
                    self.in_flight[record.task_id] = (time.time(), 0.0)
                self._disconnect("dispatch send failed")
                return
            span = time.perf_counter() - t0
            per_task = span / max(1, len(records))
            now = time.time()
            for record in records:
                self.in_flight[record.task_id] = (now, per_task)
            self.metrics.bump("dispatched", len(records))

    # ------------------------------------------------------------------

    def info(self) -> dict:
        return {
            "state": self.state,
            "forwarder_host": self.address[0],
            "forwarder_port": self.address[1],
            "last_heartbeat": self.last_heartbeat,
            "queue_depth": self.store.queue_depth(self.endpoint_id),
            "in_flight": len(self.in_flight),
            "window": self.window,
            "metrics": self.metrics.snapshot(),
        }
