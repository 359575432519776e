import sys
import time

import pytest

from funcfab.agent.providers import (
    BlockState,
    LocalProcessProvider,
    ProviderLimits,
    SimulatedBatchProvider,
    make_provider,
)


def sleeper_command(node_id):
    return [sys.executable, "-c", "import time; time.sleep(30)"]


def quick_command(node_id):
    return [sys.executable, "-c", "pass"]


@pytest.fixture
def cleanup():
    providers = []
    yield providers.append
    for provider in providers:
        for block_id in list(provider.blocks):
            provider.cancel(block_id)


def test_local_spawns_immediately(cleanup):
    provider = LocalProcessProvider(ProviderLimits(max_blocks=2, nodes_per_block=2))
    cleanup(provider)
    block_id = provider.submit_block(2, sleeper_command)
    assert provider.status(block_id) is BlockState.RUNNING
    assert len(provider.blocks[block_id].procs) == 2


def test_local_block_done_when_processes_exit(cleanup):
    provider = LocalProcessProvider(ProviderLimits(max_blocks=1))
    cleanup(provider)
    block_id = provider.submit_block(1, quick_command)
    deadline = time.time() + 10
    while time.time() < deadline:
        provider.poll()
        if provider.status(block_id) is BlockState.DONE:
            break
        time.sleep(0.05)
    assert provider.status(block_id) is BlockState.DONE


def test_nodes_per_block_limit():
    provider = LocalProcessProvider(ProviderLimits(nodes_per_block=2))
    with pytest.raises(ValueError):
        provider.submit_block(3, sleeper_command)


def test_simulated_batch_delay(cleanup):
    provider = SimulatedBatchProvider(
        ProviderLimits(max_blocks=2), {"kind": "fixed", "delay_s": 0.4}, seed=1
    )
    cleanup(provider)
    t0 = time.time()
    block_id = provider.submit_block(1, sleeper_command)
    assert provider.status(block_id) is BlockState.PENDING
    launched_at = None
    deadline = time.time() + 5
    while time.time() < deadline:
        provider.poll()
        if provider.status(block_id) is BlockState.RUNNING:
            launched_at = time.time()
            break
        time.sleep(0.02)
    assert launched_at is not None
    assert launched_at - t0 >= 0.4


def test_cancel_pending_never_launches(cleanup):
    provider = SimulatedBatchProvider(
        ProviderLimits(max_blocks=1), {"kind": "fixed", "delay_s": 0.2}, seed=1
    )
    cleanup(provider)
    block_id = provider.submit_block(1, sleeper_command)
    provider.cancel(block_id)
    provider.cancel(block_id)  # idempotent
    time.sleep(0.4)
    provider.poll()
    assert provider.status(block_id) is BlockState.DONE
    assert provider.blocks[block_id].procs == []


def test_status_monotone(cleanup):
    provider = LocalProcessProvider(ProviderLimits(max_blocks=1))
    cleanup(provider)
    block_id = provider.submit_block(1, quick_command)
    seen = []
    deadline = time.time() + 10
    while time.time() < deadline:
        provider.poll()
        state = provider.status(block_id)
        if not seen or seen[-1] is not state:
            seen.append(state)
        if state is BlockState.DONE:
            break
        time.sleep(0.02)
    order = [BlockState.PENDING, BlockState.RUNNING, BlockState.DONE]
    assert seen == [s for s in order if s in seen]


def test_make_provider_kinds():
    assert isinstance(make_provider({"type": "local"}), LocalProcessProvider)
    assert isinstance(
        make_provider({"type": "simulated-batch"}), SimulatedBatchProvider
    )
    with pytest.raises(ValueError):
        make_provider({"type": "slurm"})


def test_delay_distributions_seeded():
    limits = ProviderLimits()
    uniform = SimulatedBatchProvider(limits, {"kind": "uniform", "low_s": 1, "high_s": 2}, seed=5)
    exp = SimulatedBatchProvider(limits, {"kind": "exponential", "mean_s": 3}, seed=5)
    assert 1 <= uniform._sample_delay() <= 2
    assert exp._sample_delay() >= 0
    # same seed, same first sample
    a = SimulatedBatchProvider(limits, {"kind": "uniform", "low_s": 0, "high_s": 9}, seed=7)
    b = SimulatedBatchProvider(limits, {"kind": "uniform", "low_s": 0, "high_s": 9}, seed=7)
    assert a._sample_delay() == b._sample_delay()
