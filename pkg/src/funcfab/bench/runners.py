"""Experiment drivers.

Each driver provisions a local fabric per its plan, drives the workload,
collects per-task rows from the coordinator, checks the experiment's
invariants, and emits CSV files. Paper-scale absolute numbers are never
asserted; shapes, ratios, and conservation laws are.
"""

from __future__ import annotations

import json
import logging
import math
import os
import random
import statistics
import string
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple

from funcfab.bench.fabric import EndpointHandle, FabricController
from funcfab.bench.plan import ExperimentPlan, InvalidPlan
from funcfab.bench.report import (
    BenchAssertion,
    ExperimentReport,
    TaskRow,
    emit_report,
    percentile,
)
from funcfab.client.http import FabricClient
from funcfab.core.envelope import CODEC_RAW, Envelope

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# workload helpers

def bench_body(kind: str, ms: float = 0.0, **kw) -> bytes:
    spec = {"op": kind}
    if kind in ("sleep_ms", "stress_ms"):
        spec["ms"] = ms
    spec.update(kw)
    return json.dumps(spec).encode()


def register_workload_function(client: FabricClient, plan_workload: dict,
                               memoize: bool = False, name: str = "bench-fn") -> str:
    kind = plan_workload.get("kind", "noop")
    return client.register_function(
        name,
        bench_body(kind, ms=plan_workload.get("ms", 0.0)),
        runtime="bench",
        memoize=memoize,
    )


def submit_burst(client: FabricClient, function_id: str, endpoint_id: str,
                 inputs: List[bytes], threads: int = 8,
                 retriable: bool = True) -> List[str]:
    """Submit everything as fast as the API accepts it."""
    task_ids: List[Optional[str]] = [None] * len(inputs)
    sessions = [FabricClient(client.base_url, client.token) for _ in range(threads)]

    def worker(idx: int):
        session = sessions[idx]
        for i in range(idx, len(inputs), threads):
            task_ids[i] = session.submit(
                function_id, endpoint_id, Envelope(CODEC_RAW, inputs[i]),
                retriable=retriable,
            )

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(worker, range(threads)))
    return list(task_ids)


def submit_uniform(client: FabricClient, function_id: str, endpoint_id: str,
                   inputs: List[bytes], rate: float,
                   retriable: bool = True) -> List[str]:
    """Submit at a uniform rate (tasks per second)."""
    task_ids = []
    start = time.monotonic()
    for i, payload in enumerate(inputs):
        target = start + i / rate
        delay = target - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        task_ids.append(
            client.submit(function_id, endpoint_id, Envelope(CODEC_RAW, payload),
                          retriable=retriable)
        )
    return task_ids


def collect_report(client: FabricClient, endpoint_id: str, task_ids: List[str],
                   name: str, timeout: float = 300.0,
                   require_terminal: bool = True) -> ExperimentReport:
    wanted = set(task_ids)
    deadline = time.monotonic() + timeout
    rows: Dict[str, TaskRow] = {}
    while True:
        for raw in client.export_tasks(endpoint_id):
            if raw["task_id"] in wanted and raw["terminal_at"] is not None:
                rows[raw["task_id"]] = TaskRow.from_export(raw)
        if len(rows) >= len(wanted):
            break
        if time.monotonic() > deadline:
            if require_terminal:
                raise BenchAssertion(
                    "%d of %d tasks never became terminal within %.0fs"
                    % (len(wanted) - len(rows), len(wanted), timeout)
                )
            break
        time.sleep(0.2)
    info = client.endpoint_info(endpoint_id)
    report = ExperimentReport(
        name=name,
        submitted=len(task_ids),
        rows=[rows[tid] for tid in task_ids if tid in rows],
        duplicate_count=info["metrics"]["duplicates_discarded"],
        meta={"endpoint": info},
    )
    return report


def drain(client: FabricClient, function_id: str, endpoint_id: str,
          count: int = 1, timeout: float = 30.0):
    """Throwaway invocations, e.g. to warm the pool."""
    ids = [
        client.submit(function_id, endpoint_id, Envelope(CODEC_RAW, b"warmup"))
        for _ in range(count)
    ]
    for task_id in ids:
        client.result(task_id, timeout=timeout)


# ----------------------------------------------------------------------
# drivers

def run_soak(plan: ExperimentPlan, out_dir: str, seed: Optional[int]) -> List[str]:
    """At-least-once conservation under process kills."""
    workload = plan.workload
    count = int(workload.get("count", 2000))
    rate = float(workload.get("arrival", {}).get("rate", 140.0))
    topo = plan.topology
    failures: List[str] = []
    with FabricController(out_dir, seed) as fabric:
        fabric.start_coordinator()
        handle = fabric.add_endpoint(
            "soak",
            nodes=topo.get("nodes", 2),
            workers_per_node=topo.get("workers_per_node", 8),
            heartbeat_interval=plan.knobs.get("heartbeat_interval", 0.25),
        )
        client = fabric.client()
        fid = register_workload_function(client, workload)
        drain(client, fid, handle.endpoint_id)

        stop_faults = threading.Event()
        fault_errors: List[str] = []

        def fault_worker():
            t0 = time.monotonic()
            last_kill = None
            for fault in plan.faults:
                delay = fault["t"] - (time.monotonic() - t0)
                if delay > 0 and stop_faults.wait(delay):
                    return
                action = fault["action"]
                try:
                    if action == "kill-manager":
                        fabric.kill_manager(handle)
                        last_kill = "manager"
                    elif action == "kill-agent":
                        fabric.kill_agent(handle)
                        last_kill = "agent"
                    elif action == "restart":
                        if last_kill == "manager":
                            fabric.restart_manager(handle)
                        elif last_kill == "agent":
                            fabric.restart_agent(handle)
                        last_kill = None
                except Exception as exc:  # pragma: no cover - surfaced below
                    fault_errors.append("%s failed: %s" % (action, exc))

        faults = threading.Thread(target=fault_worker, daemon=True)
        faults.start()
        inputs = [b"%d" % i for i in range(count)]
        task_ids = submit_uniform(client, fid, handle.endpoint_id, inputs, rate)
        faults.join(timeout=120)
        stop_faults.set()
        report = collect_report(
            client, handle.endpoint_id, task_ids, plan.name, timeout=240
        )
        emit_report(report, out_dir)
        aggregates = report.aggregates()
        if fault_errors:
            failures.extend(fault_errors)
        try:
            report.assert_conservation(retriable=True)
        except BenchAssertion as exc:
            failures.append(str(exc))
        if aggregates["loss_count"] != 0:
            failures.append("loss count %d != 0" % aggregates["loss_count"])
        log.info(
            "soak: %d tasks, %d duplicates discarded, completion %.1fs",
            count, aggregates["duplicate_count"], aggregates["completion_s"],
        )
    return failures


def run_fault(plan: ExperimentPlan, out_dir: str, seed: Optional[int]) -> List[str]:
    """Latency timeline around component failure and recovery."""
    workload = plan.workload
    count = int(workload.get("count", 720))
    rate = float(workload.get("arrival", {}).get("rate", 60.0))
    knobs = plan.knobs
    topo = plan.topology
    failures: List[str] = []
    with FabricController(out_dir, seed) as fabric:
        fabric.start_coordinator()
        handle = fabric.add_endpoint(
            "fault",
            nodes=topo.get("nodes", 2),
            workers_per_node=topo.get("workers_per_node", 4),
            heartbeat_interval=knobs.get("heartbeat_interval", 0.25),
            miss_threshold=knobs.get("miss_threshold", 3),
        )
        client = fabric.client()
        fid = register_workload_function(client, workload)
        drain(client, fid, handle.endpoint_id)

        events: List[Tuple[float, str]] = []
        t_start = time.monotonic()
        wall_start = time.time()

        def fault_worker():
            last_kill = None
            for fault in plan.faults:
                delay = fault["t"] - (time.monotonic() - t_start)
                if delay > 0:
                    time.sleep(delay)
                action = fault["action"]
                events.append((time.time(), action))
                try:
                    if action == "kill-manager":
                        fabric.kill_manager(handle)
                        last_kill = "manager"
                    elif action == "kill-agent":
                        fabric.kill_agent(handle)
                        last_kill = "agent"
                    elif action == "restart":
                        if last_kill == "manager":
                            fabric.restart_manager(handle)
                        else:
                            fabric.restart_agent(handle)
                except Exception as exc:
                    failures.append("%s failed: %s" % (action, exc))

        faults = threading.Thread(target=fault_worker, daemon=True)
        faults.start()
        inputs = [b"%d" % i for i in range(count)]
        task_ids = submit_uniform(client, fid, handle.endpoint_id, inputs, rate)
        faults.join(timeout=120)
        report = collect_report(
            client, handle.endpoint_id, task_ids, plan.name, timeout=240
        )
        emit_report(report, out_dir)
        # timeline csv: per-task submit offset and latency
        timeline = os.path.join(out_dir, "timeline.csv")
        with open(timeline, "w", encoding="utf-8") as fp:
            fp.write("submit_offset_s,latency_s,state\n")
            for row in sorted(report.rows, key=lambda r: r.submit_time):
                fp.write(
                    "%.4f,%.4f,%s\n"
                    % (row.submit_time - wall_start, row.latency or -1, row.state)
                )
        try:
            report.assert_conservation(retriable=True)
        except BenchAssertion as exc:
            failures.append(str(exc))

        if plan.faults:
            kill_wall = next((t for t, a in events if a.startswith("kill")), None)
            restart_wall = next((t for t, a in events if a == "restart"), None)
            phases = _fault_phases(
                report, wall_start, kill_wall, restart_wall,
                recovery_offset=float(knobs.get("recovery_offset_s", 1.0)),
            )
            with open(os.path.join(out_dir, "phases.json"), "w", encoding="utf-8") as fp:
                json.dump(phases, fp, indent=2)
            if phases["baseline_p95"] <= 0:
                failures.append("baseline phase has no samples")
            else:
                if phases["outage_p95"] < 2.0 * phases["baseline_p95"]:
                    failures.append(
                        "outage p95 %.3fs < 2x baseline %.3fs"
                        % (phases["outage_p95"], phases["baseline_p95"])
                    )
                if phases["recovered_p95"] > 1.5 * phases["baseline_p95"]:
                    failures.append(
                        "post-recovery p95 %.3fs > 1.5x baseline %.3fs"
                        % (phases["recovered_p95"], phases["baseline_p95"])
                    )
    return failures


def _fault_phases(report: ExperimentReport, wall_start: float,
                  kill_wall: Optional[float], restart_wall: Optional[float],
                  recovery_offset: float = 1.0) -> dict:
    def window(lo: float, hi: float) -> List[float]:
        return [
            r.latency
            for r in report.rows
            if r.latency is not None and lo <= r.submit_time < hi
        ]

    kill = kill_wall or (wall_start + 2.0)
    restart = restart_wall or (kill + 2.0)
    baseline = window(wall_start + 0.3, kill - 0.1)
    outage = window(kill, restart + 0.2)
    recovered = window(restart + recovery_offset, restart + recovery_offset + 5.0)
    return {
        "kill_offset_s": kill - wall_start,
        "restart_offset_s": restart - wall_start,
        "baseline_p95": percentile(baseline, 95) if baseline else -1.0,
        "outage_p95": percentile(outage, 95) if outage else -1.0,
        "recovered_p95": percentile(recovered, 95) if recovered else -1.0,
        "baseline_n": len(baseline),
        "outage_n": len(outage),
        "recovered_n": len(recovered),
    }


def run_latency(plan: ExperimentPlan, out_dir: str, seed: Optional[int]) -> List[str]:
    """Warm/cold round-trip decomposition over sequential echo tasks."""
    count = int(plan.workload.get("count", 50))
    failures: List[str] = []
    with FabricController(out_dir, seed) as fabric:
        fabric.start_coordinator()
        handle = fabric.add_endpoint(
            "latency",
            nodes=plan.topology.get("nodes", 1),
            workers_per_node=plan.topology.get("workers_per_node", 4),
            heartbeat_interval=plan.knobs.get("heartbeat_interval", 0.1),
            tags={"default": {}, "coldtag": {}},
        )
        client = fabric.client(poll_interval=0.005)
        fid = client.register_function("echo-warm", bench_body("echo"))
        drain(client, fid, handle.endpoint_id)  # pre-warm
        warm_rows = []
        for i in range(count):
            task_id = client.submit(
                fid, handle.endpoint_id, Envelope(CODEC_RAW, b"hello-world")
            )
            client.result(task_id, timeout=30)
            warm_rows.append(task_id)
        report = collect_report(client, handle.endpoint_id, warm_rows, plan.name)
        emit_report(report, out_dir, prefix="warm_")

        # cold path: a tag nobody has deployed yet forces a worker launch
        cold_fid = client.register_function(
            "echo-cold", bench_body("echo"), container_tag="coldtag"
        )
        cold_task = client.submit(
            cold_fid, handle.endpoint_id, Envelope(CODEC_RAW, b"hello-world")
        )
        client.result(cold_task, timeout=60)
        cold_report = collect_report(
            client, handle.endpoint_id, [cold_task], plan.name + "-cold"
        )
        emit_report(cold_report, out_dir, prefix="cold_")

        aggregates = report.aggregates()
        summary = {
            "mean_service_s": aggregates["mean_service_s"],
            "mean_forwarder_s": aggregates["mean_forwarder_s"],
            "mean_endpoint_s": aggregates["mean_endpoint_s"],
            "mean_exec_s": aggregates["mean_exec_s"],
            "warm_total_p50_s": aggregates["p50_s"],
            "cold_total_s": cold_report.rows[0].latency,
            "stdev_service_s": statistics.pstdev([r.service_time for r in report.rows]),
            "stdev_forwarder_s": statistics.pstdev([r.forwarder_time for r in report.rows]),
            "stdev_endpoint_s": statistics.pstdev([r.endpoint_time for r in report.rows]),
            "stdev_exec_s": statistics.pstdev([r.exec_time for r in report.rows]),
        }
        with open(os.path.join(out_dir, "breakdown.json"), "w", encoding="utf-8") as fp:
            json.dump(summary, fp, indent=2)

        for row in report.rows:
            for field in ("service_time", "forwarder_time", "endpoint_time", "exec_time"):
                if getattr(row, field) <= 0:
                    failures.append("%s not positive on %s" % (field, row.task_id))
                    break
        warm_median = aggregates["p50_s"]
        mean_exec = aggregates["mean_exec_s"]
        if mean_exec >= 0.1 * warm_median:
            failures.append(
                "exec time %.4fs is not small relative to total %.4fs"
                % (mean_exec, warm_median)
            )
        if cold_report.rows[0].latency <= warm_median:
            failures.append(
                "cold total %.4fs not above warm median %.4fs"
                % (cold_report.rows[0].latency, warm_median)
            )
    return failures


def run_scaling(plan: ExperimentPlan, out_dir: str, seed: Optional[int]) -> List[str]:
    """Strong and weak scaling shapes over a worker-count sweep."""
    mode = plan.sweep.get("mode", "strong")
    workers = plan.sweep.get("workers", [1, 2, 4, 8, 16, 32])
    failures: List[str] = []
    results = []
    with FabricController(out_dir, seed) as fabric:
        fabric.start_coordinator()
        client = fabric.client()
        for w in workers:
            nodes = max(1, math.ceil(w / 8))
            wpn = min(w, 8)
            handle = fabric.add_endpoint(
                "scale-%d" % w, nodes=nodes, workers_per_node=wpn,
                heartbeat_interval=plan.knobs.get("heartbeat_interval", 0.1),
            )
            fid = register_workload_function(client, plan.workload, name="scale-fn-%d" % w)
            drain(client, fid, handle.endpoint_id)
            if mode == "strong":
                count = int(plan.workload.get("count", 1000))
            else:
                count = int(plan.sweep.get("tasks_per_worker", 10)) * w
            inputs = [b"%d" % i for i in range(count)]
            task_ids = submit_burst(client, fid, handle.endpoint_id, inputs)
            report = collect_report(
                client, handle.endpoint_id, task_ids, "%s-w%d" % (plan.name, w),
                timeout=600,
            )
            emit_report(report, out_dir, prefix="w%03d_" % w)
            try:
                report.assert_conservation(retriable=True)
            except BenchAssertion as exc:
                failures.append("w=%d: %s" % (w, exc))
            completion = report.aggregates()["completion_s"]
            results.append((w, completion))
            log.info("scaling %s w=%d completion=%.2fs", mode, w, completion)
            fabric.kill_agent(handle)

        with open(os.path.join(out_dir, "sweep.csv"), "w", encoding="utf-8") as fp:
            fp.write("workers,completion_s\n")
            for w, c in results:
                fp.write("%d,%.4f\n" % (w, c))
        times = [c for _w, c in results]
        if mode == "strong":
            for (w1, c1), (w2, c2) in zip(results, results[1:]):
                if c2 > c1 * 1.10:
                    failures.append(
                        "strong scaling regressed: w=%d %.2fs -> w=%d %.2fs (>10%% noise)"
                        % (w1, c1, w2, c2)
                    )
        else:
            lo, hi = min(times), max(times)
            if hi > lo * 1.25:
                failures.append(
                    "weak scaling spread %.2fs..%.2fs exceeds 25%%" % (lo, hi)
                )
    return failures


def run_memo_sweep(plan: ExperimentPlan, out_dir: str, seed: Optional[int]) -> List[str]:
    """Completion time versus repeated-request fraction."""
    count = int(plan.workload.get("count", 400))
    fractions = plan.sweep.get("repeat_fractions", [0, 25, 50, 75, 100])
    rng = random.Random(seed)
    failures: List[str] = []
    results = []
    with FabricController(out_dir, seed) as fabric:
        fabric.start_coordinator()
        handle = fabric.add_endpoint(
            "memo",
            nodes=plan.topology.get("nodes", 2),
            workers_per_node=plan.topology.get("workers_per_node", 8),
            heartbeat_interval=plan.knobs.get("heartbeat_interval", 0.1),
        )
        client = fabric.client()
        for fraction in fractions:
            fid = register_workload_function(
                client, plan.workload, memoize=True, name="memo-%d" % fraction
            )
            unique = max(1, round(count * (100 - fraction) / 100.0))
            salt = "".join(rng.choice(string.ascii_lowercase) for _ in range(8))
            pool = ["%s-%d" % (salt, i) for i in range(unique)]
            inputs = [pool[i % unique].encode() for i in range(count)]
            rng.shuffle(inputs)
            task_ids = submit_burst(client, fid, handle.endpoint_id, inputs)
            report = collect_report(
                client, handle.endpoint_id, task_ids,
                "%s-f%d" % (plan.name, fraction), timeout=600,
            )
            emit_report(report, out_dir, prefix="f%03d_" % fraction)
            try:
                report.assert_conservation(retriable=True)
            except BenchAssertion as exc:
                failures.append("fraction %d: %s" % (fraction, exc))
            completion = report.aggregates()["completion_s"]
            results.append((fraction, completion))
            log.info("memo fraction %d%% completion %.2fs", fraction, completion)

        with open(os.path.join(out_dir, "sweep.csv"), "w", encoding="utf-8") as fp:
            fp.write("repeat_fraction,completion_s\n")
            for fraction, completion in results:
                fp.write("%d,%.4f\n" % (fraction, completion))
        times = [c for _f, c in results]
        for (f1, c1), (f2, c2) in zip(results, results[1:]):
            if not c2 < c1:
                failures.append(
                    "completion not strictly decreasing: %d%%=%.2fs -> %d%%=%.2fs"
                    % (f1, c1, f2, c2)
                )
        # time(100%) <= 0.2 * time(0%), with +/-30% tolerance
        if times and times[-1] > 0.2 * 1.3 * times[0]:
            failures.append(
                "memo ratio too weak: %.2fs vs %.2fs (want <= 0.26x)"
                % (times[-1], times[0])
            )
    return failures


def run_executor_batching(plan: ExperimentPlan, out_dir: str,
                          seed: Optional[int]) -> List[str]:
    """Aggregated adverts + multi-task dispatch versus single-task adverts."""
    count = int(plan.workload.get("count", 10000))
    topo = plan.topology
    failures: List[str] = []
    completions = {}
    with FabricController(out_dir, seed) as fabric:
        fabric.start_coordinator()
        client = fabric.client()
        for mode, batching in (("on", True), ("off", False)):
            handle = fabric.add_endpoint(
                "exec-%s" % mode,
                nodes=topo.get("nodes", 8),
                workers_per_node=topo.get("workers_per_node", 4),
                executor_batching=batching,
                heartbeat_interval=plan.knobs.get("heartbeat_interval", 0.05),
                miss_threshold=plan.knobs.get("miss_threshold", 20),
            )
            fid = register_workload_function(client, plan.workload, name="exec-" + mode)
            drain(client, fid, handle.endpoint_id)
            inputs = [b"%d" % i for i in range(count)]
            task_ids = submit_burst(client, fid, handle.endpoint_id, inputs)
            report = collect_report(
                client, handle.endpoint_id, task_ids, "%s-%s" % (plan.name, mode),
                timeout=900,
            )
            emit_report(report, out_dir, prefix="%s_" % mode)
            try:
                report.assert_conservation(retriable=True)
            except BenchAssertion as exc:
                failures.append("%s: %s" % (mode, exc))
            completions[mode] = report.aggregates()["completion_s"]
            log.info("executor batching %s: %.2fs", mode, completions[mode])
            fabric.kill_agent(handle)
        with open(os.path.join(out_dir, "sweep.csv"), "w", encoding="utf-8") as fp:
            fp.write("mode,completion_s\n")
            for mode, completion in completions.items():
                fp.write("%s,%.4f\n" % (mode, completion))
        if completions["on"] > 0.25 * completions["off"]:
            failures.append(
                "batched completion %.2fs > 25%% of unbatched %.2fs"
                % (completions["on"], completions["off"])
            )
    return failures


def run_user_batching(plan: ExperimentPlan, out_dir: str,
                      seed: Optional[int]) -> List[str]:
    """Mean per-task latency versus user batch size."""
    sizes = plan.sweep.get("batch_sizes", [1, 4, 16, 64, 256])
    ms = plan.workload.get("ms", 10)
    failures: List[str] = []
    results = []
    with FabricController(out_dir, seed) as fabric:
        fabric.start_coordinator()
        handle = fabric.add_endpoint(
            "ubatch",
            nodes=plan.topology.get("nodes", 1),
            workers_per_node=plan.topology.get("workers_per_node", 4),
            heartbeat_interval=plan.knobs.get("heartbeat_interval", 0.1),
        )
        client = fabric.client(poll_interval=0.005)
        fid = register_workload_function(client, plan.workload, name="ubatch-fn")
        drain(client, fid, handle.endpoint_id)
        for size in sizes:
            repeats = max(3, min(40, 160 // size if size < 160 else 3))
            per_task = []
            for r in range(repeats):
                inputs = [Envelope(CODEC_RAW, b"%d-%d" % (r, i)) for i in range(size)]
                task_ids, _sizes = client.submit_batch(
                    fid, handle.endpoint_id, inputs, batch_size=size
                )
                assert len(task_ids) == 1
                client.result(task_ids[0], timeout=120)
                row = next(
                    raw for raw in client.export_tasks(handle.endpoint_id)
                    if raw["task_id"] == task_ids[0]
                )
                latency = row["terminal_at"] - row["created_at"]
                per_task.append(latency / size)
            mean_latency = statistics.fmean(per_task)
            results.append((size, mean_latency))
            log.info("user batch size %d: %.4fs per task", size, mean_latency)
        with open(os.path.join(out_dir, "sweep.csv"), "w", encoding="utf-8") as fp:
            fp.write("batch_size,mean_per_task_latency_s\n")
            for size, latency in results:
                fp.write("%d,%.5f\n" % (size, latency))
        by_size = dict(results)
        ordered = [by_size[s] for s in sizes]
        # strictly decreasing through the third point (1 -> 16 by default)
        cut = min(3, len(ordered))
        for i in range(cut - 1):
            if not ordered[i + 1] < ordered[i]:
                failures.append(
                    "per-task latency not strictly decreasing: size %d=%.4fs -> %d=%.4fs"
                    % (sizes[i], ordered[i], sizes[i + 1], ordered[i + 1])
                )
        tail = ordered[cut - 1:]
        if tail and max(tail) > min(tail) * 1.2:
            failures.append(
                "large-batch latencies not flat within 20%%: %r" % tail
            )
    return failures


def run_prefetch_sweep(plan: ExperimentPlan, out_dir: str,
                       seed: Optional[int]) -> List[str]:
    """Completion time versus prefetch count."""
    counts = plan.sweep.get("prefetch_counts", [0, 1, 2, 4, 8, 16])
    wpn = plan.topology.get("workers_per_node", 8)
    n_tasks = int(plan.workload.get("count", 800))
    failures: List[str] = []
    results = []
    with FabricController(out_dir, seed) as fabric:
        fabric.start_coordinator()
        client = fabric.client()
        for prefetch in counts:
            handle = fabric.add_endpoint(
                "prefetch-%d" % prefetch,
                nodes=plan.topology.get("nodes", 1),
                workers_per_node=wpn,
                prefetch_count=prefetch,
                heartbeat_interval=plan.knobs.get("heartbeat_interval", 0.1),
                advert_min_interval_s=plan.knobs.get("advert_min_interval_s", 0.0),
            )
            fid = register_workload_function(
                client, plan.workload, name="prefetch-fn-%d" % prefetch
            )
            drain(client, fid, handle.endpoint_id)
            inputs = [b"%d" % i for i in range(n_tasks)]
            task_ids = submit_burst(client, fid, handle.endpoint_id, inputs)
            report = collect_report(
                client, handle.endpoint_id, task_ids,
                "%s-p%d" % (plan.name, prefetch), timeout=600,
            )
            emit_report(report, out_dir, prefix="p%03d_" % prefetch)
            try:
                report.assert_conservation(retriable=True)
            except BenchAssertion as exc:
                failures.append("prefetch %d: %s" % (prefetch, exc))
            completion = report.aggregates()["completion_s"]
            results.append((prefetch, completion))
            log.info("prefetch %d completion %.2fs", prefetch, completion)
            fabric.kill_agent(handle)
        with open(os.path.join(out_dir, "sweep.csv"), "w", encoding="utf-8") as fp:
            fp.write("prefetch_count,completion_s\n")
            for prefetch, completion in results:
                fp.write("%d,%.4f\n" % (prefetch, completion))
        # non-increasing within a 10% noise band up to workers-per-node
        for (p1, c1), (p2, c2) in zip(results, results[1:]):
            if p2 <= wpn and c2 > c1 * 1.10:
                failures.append(
                    "prefetch trend regressed: p=%d %.2fs -> p=%d %.2fs"
                    % (p1, c1, p2, c2)
                )
    return failures


def run_elasticity(plan: ExperimentPlan, out_dir: str,
                   seed: Optional[int]) -> List[str]:
    """Per-class worker counts track periodic load then return to zero."""
    knobs = plan.knobs
    period = float(plan.workload.get("period_s", 12.0))
    cycles = int(plan.workload.get("cycles", 2))
    classes = plan.workload.get(
        "classes",
        [
            {"tag": "cls-a", "ms": 100, "count": 1, "max_workers": 10},
            {"tag": "cls-b", "ms": 1000, "count": 5, "max_workers": 10},
            {"tag": "cls-c", "ms": 2000, "count": 20, "max_workers": 10},
        ],
    )
    failures: List[str] = []
    with FabricController(out_dir, seed) as fabric:
        fabric.start_coordinator()
        tags = {
            cls["tag"]: {"min_workers": 0, "max_workers": cls["max_workers"]}
            for cls in classes
        }
        handle = fabric.add_endpoint(
            "elastic",
            nodes=plan.topology.get("nodes", 2),
            workers_per_node=plan.topology.get("workers_per_node", 8),
            default_tags=[],
            tags=tags,
            prefetch_count=0,
            warm_ttl_s=knobs.get("warm_ttl_s", 4.0),
            heartbeat_interval=knobs.get("heartbeat_interval", 0.25),
            scaler_interval_s=knobs.get("scaler_interval_s", 0.5),
            wait_workers=False,
        )
        client = fabric.client()
        fids = {
            cls["tag"]: client.register_function(
                "elastic-" + cls["tag"],
                bench_body("sleep_ms", ms=cls["ms"]),
                container_tag=cls["tag"],
            )
            for cls in classes
        }
        all_ids = []
        cycle_windows = []
        for cycle in range(cycles):
            cycle_start = time.time()
            for cls in classes:
                for i in range(cls["count"]):
                    all_ids.append(
                        client.submit(
                            fids[cls["tag"]], handle.endpoint_id,
                            Envelope(CODEC_RAW, b"%d-%d" % (cycle, i)),
                        )
                    )
            cycle_windows.append(cycle_start)
            if cycle < cycles - 1:
                time.sleep(period)
        # wait for the final cycle to drain and idle workers to be reaped
        time.sleep(period)
        report = collect_report(client, handle.endpoint_id, all_ids, plan.name, timeout=240)
        emit_report(report, out_dir)
        try:
            report.assert_conservation(retriable=True)
        except BenchAssertion as exc:
            failures.append(str(exc))

        lines = fabric.metrics_lines(handle)
        with open(os.path.join(out_dir, "workers.csv"), "w", encoding="utf-8") as fp:
            fp.write("t,%s\n" % ",".join(cls["tag"] for cls in classes))
            for line in lines:
                workers = line.get("workers", {})
                fp.write(
                    "%.2f,%s\n"
                    % (
                        line["t"],
                        ",".join(
                            str(workers.get(cls["tag"], {}).get("deployed", 0))
                            for cls in classes
                        ),
                    )
                )
        for cls in classes:
            expected = min(cls["count"], cls["max_workers"])
            per_cycle_max = []
            for idx, start in enumerate(cycle_windows):
                end = start + period
                peak = max(
                    (
                        line.get("workers", {}).get(cls["tag"], {}).get("deployed", 0)
                        for line in lines
                        if start <= line["t"] < end
                    ),
                    default=0,
                )
                per_cycle_max.append(peak)
            for idx, peak in enumerate(per_cycle_max):
                if peak != expected:
                    failures.append(
                        "class %s cycle %d peaked at %d workers, expected exactly %d"
                        % (cls["tag"], idx, peak, expected)
                    )
            final = (
                lines[-1].get("workers", {}).get(cls["tag"], {}).get("deployed", 0)
                if lines
                else -1
            )
            if final != 0:
                failures.append(
                    "class %s still has %d workers after idle timeout" % (cls["tag"], final)
                )
    return failures


DRIVERS = {
    "soak": run_soak,
    "fault": run_fault,
    "latency": run_latency,
    "scaling": run_scaling,
    "memo_sweep": run_memo_sweep,
    "executor_batching": run_executor_batching,
    "user_batching": run_user_batching,
    "prefetch_sweep": run_prefetch_sweep,
    "elasticity": run_elasticity,
}


def run_plan(plan: ExperimentPlan, out_dir: str, seed: Optional[int] = None) -> List[str]:
    """Run one experiment plan. Returns a list of invariant violations
    (empty = success)."""
    plan.validate()
    if seed is None:
        seed = plan.seed
    driver = DRIVERS.get(plan.experiment)
    if driver is None:
        raise InvalidPlan("no driver for %r" % plan.experiment)
    os.makedirs(out_dir, exist_ok=True)
    failures = driver(plan, out_dir, seed)
    status_path = os.path.join(out_dir, "status.json")
    with open(status_path, "w", encoding="utf-8") as fp:
        json.dump({"experiment": plan.experiment, "name": plan.name,
                   "failures": failures}, fp, indent=2)
    return failures
