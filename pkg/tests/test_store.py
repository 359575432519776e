import time

from funcfab.core.envelope import CODEC_RAW, Envelope
from funcfab.core.lifecycle import LifecycleEvent, TaskState, advance_state
from funcfab.core.memo import memo_key
from funcfab.core.model import FunctionRecord, Runtime, TaskRecord, new_id
from funcfab.service.store import DurableStore


def make_store(tmp_path, name="s.db"):
    return DurableStore(str(tmp_path / name))


def make_function(memoize=False):
    return FunctionRecord(
        function_id=new_id(),
        name="f",
        body=b'{"op":"echo"}',
        runtime=Runtime.BENCH,
        container_tag="",
        memoize=memoize,
        owner="alice",
        allowed_principals=frozenset({"alice"}),
        registered_at=time.time(),
    )


def queued_task(func, endpoint_id, payload=b"x", retriable=True):
    record = TaskRecord(
        task_id=new_id(),
        function_id=func.function_id,
        function_version=func.version,
        endpoint_id=endpoint_id,
        input=Envelope(CODEC_RAW, payload),
        submitter="alice",
        retriable=retriable,
    )
    return advance_state(record, LifecycleEvent.PERSISTED)


def test_function_round_trip(tmp_path):
    store = make_store(tmp_path)
    func = make_function()
    store.register_function(func)
    loaded = store.get_function(func.function_id)
    assert loaded.body == func.body
    assert loaded.version == 1
    assert loaded.owner == "alice"


def test_function_versions(tmp_path):
    store = make_store(tmp_path)
    func = make_function()
    store.register_function(func)
    import dataclasses

    v2 = dataclasses.replace(func, version=2, body=b"new")
    store.register_function(v2)
    assert store.get_function(func.function_id).version == 2
    assert store.get_function(func.function_id, version=1).body == func.body


def test_queue_fifo_and_dispatch(tmp_path):
    store = make_store(tmp_path)
    func = make_function()
    store.register_function(func)
    ep = new_id()
    tasks = [queued_task(func, ep, payload=bytes([i])) for i in range(5)]
    store.insert_tasks(tasks)
    assert store.queue_depth(ep) == 5
    popped, memo_done = store.pop_for_dispatch(ep, 3)
    assert memo_done == 0
    assert [t.task_id for t in popped] == [t.task_id for t in tasks[:3]]
    assert all(t.state is TaskState.DISPATCHED for t in popped)
    assert store.queue_depth(ep) == 2


def test_complete_and_duplicate(tmp_path):
    store = make_store(tmp_path)
    func = make_function()
    store.register_function(func)
    ep = new_id()
    task = queued_task(func, ep)
    store.insert_tasks([task])
    store.pop_for_dispatch(ep, 1)
    out = store.complete_task(
        task.task_id, "success", Envelope(CODEC_RAW, b"r"), None, exec_time=0.01
    )
    assert out == "completed"
    loaded = store.get_task(task.task_id)
    assert loaded.state is TaskState.SUCCEEDED
    assert loaded.result.payload == b"r"
    assert loaded.timing.exec_time == 0.01
    # first completion wins; the second is a duplicate and changes nothing
    out2 = store.complete_task(task.task_id, "success", Envelope(CODEC_RAW, b"zzz"), None)
    assert out2 == "duplicate"
    assert store.get_task(task.task_id).result.payload == b"r"


def test_requeue_retriable_goes_to_tail(tmp_path):
    store = make_store(tmp_path)
    func = make_function()
    store.register_function(func)
    ep = new_id()
    first, second = queued_task(func, ep), queued_task(func, ep)
    store.insert_tasks([first, second])
    popped, _ = store.pop_for_dispatch(ep, 1)
    assert popped[0].task_id == first.task_id
    requeued, failed = store.requeue_tasks([first.task_id])
    assert (requeued, failed) == (1, 0)
    record = store.get_task(first.task_id)
    assert record.state is TaskState.QUEUED
    assert record.attempt == 1
    # tail position: the untouched task dispatches first
    popped, _ = store.pop_for_dispatch(ep, 2)
    assert [t.task_id for t in popped] == [second.task_id, first.task_id]


def test_requeue_non_retriable_fails(tmp_path):
    store = make_store(tmp_path)
    func = make_function()
    store.register_function(func)
    ep = new_id()
    task = queued_task(func, ep, retriable=False)
    store.insert_tasks([task])
    store.pop_for_dispatch(ep, 1)
    requeued, failed = store.requeue_tasks([task.task_id])
    assert (requeued, failed) == (0, 1)
    record = store.get_task(task.task_id)
    assert record.state is TaskState.FAILED
    assert record.error.type == "lost"


def test_lost_report_requeues(tmp_path):
    store = make_store(tmp_path)
    func = make_function()
    store.register_function(func)
    ep = new_id()
    task = queued_task(func, ep)
    store.insert_tasks([task])
    store.pop_for_dispatch(ep, 1)
    assert store.complete_task(task.task_id, "lost", None, None) == "requeued"
    assert store.get_task(task.task_id).state is TaskState.QUEUED


def test_stale_queue_rows_skipped(tmp_path):
    store = make_store(tmp_path)
    func = make_function()
    store.register_function(func)
    ep = new_id()
    task = queued_task(func, ep)
    store.insert_tasks([task])
    # a result lands while the task is still queued (zombie completion)
    out = store.complete_task(task.task_id, "success", Envelope(CODEC_RAW, b"r"), None)
    assert out == "completed"
    popped, memo_done = store.pop_for_dispatch(ep, 5)
    assert popped == [] and memo_done == 0
    assert store.queue_depth(ep) == 0


def test_restart_recovery_requeues_inflight(tmp_path):
    path = str(tmp_path / "r.db")
    store = DurableStore(path)
    func = make_function()
    store.register_function(func)
    ep = new_id()
    tasks = [queued_task(func, ep) for _ in range(3)]
    store.insert_tasks(tasks)
    store.pop_for_dispatch(ep, 2)  # two in flight
    store.close()

    reopened = DurableStore(path)
    assert reopened.recover_inflight() == 2
    assert reopened.queue_depth(ep) == 3
    for task in tasks:
        assert reopened.get_task(task.task_id).state is TaskState.QUEUED


def test_memo_cache_and_dispatch_time_hit(tmp_path):
    store = make_store(tmp_path)
    func = make_function(memoize=True)
    store.register_function(func)
    ep = new_id()
    first = queued_task(func, ep, payload=b"same")
    store.insert_tasks([first])
    store.pop_for_dispatch(ep, 1)
    store.complete_task(first.task_id, "success", Envelope(CODEC_RAW, b"out"), None)
    key = memo_key(func.body, Envelope(CODEC_RAW, b"same"))
    assert store.memo_get(key).payload == b"out"

    # an identical task already queued completes at dispatch time
    second = queued_task(func, ep, payload=b"same")
    store.insert_tasks([second])
    popped, memo_done = store.pop_for_dispatch(ep, 1)
    assert popped == [] and memo_done == 1
    loaded = store.get_task(second.task_id)
    assert loaded.state is TaskState.SUCCEEDED
    assert loaded.memo_hit
    assert loaded.result.payload == b"out"


def test_purge_after_retrieval(tmp_path):
    store = make_store(tmp_path)
    func = make_function()
    store.register_function(func)
    ep = new_id()
    task = queued_task(func, ep)
    store.insert_tasks([task])
    store.pop_for_dispatch(ep, 1)
    store.complete_task(task.task_id, "success", Envelope(CODEC_RAW, b"r"), None)
    assert store.purge_retrieved(0.0) == 0  # nothing retrieved yet
    store.mark_retrieved(task.task_id)
    time.sleep(0.02)
    assert store.purge_retrieved(0.01) == 1
    record, purged = store.result_state(task.task_id)
    assert purged and record.result is None
