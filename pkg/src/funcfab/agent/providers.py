"""Resource providers.

Pilot-job provisioning behind one small interface: ``submit_block`` asks for
n nodes running a launch command, ``status`` reports the monotone
PENDING -> RUNNING -> DONE/FAILED progression, and ``cancel`` is idempotent.

Two concrete providers, both launching local manager processes:

  LocalProcessProvider    nodes start immediately
  SimulatedBatchProvider  blocks sit PENDING for a sampled queue delay first,
                          modeling batch-scheduler wait times
"""

from __future__ import annotations

import enum
import logging
import random
import subprocess
import sys
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

log = logging.getLogger(__name__)

CommandBuilder = Callable[[str], List[str]]  # node_id -> argv


class BlockState(str, enum.Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    DONE = "DONE"
    FAILED = "FAILED"


class SpawnFailure(Exception):
    pass


@dataclass
class Block:
    block_id: str
    nodes: int
    command: CommandBuilder
    state: BlockState = BlockState.PENDING
    submitted_at: float = field(default_factory=time.time)
    launch_at: float = 0.0
    cancelled: bool = False
    procs: List[subprocess.Popen] = field(default_factory=list)


@dataclass
class ProviderLimits:
    min_blocks: int = 0
    max_blocks: int = 4
    nodes_per_block: int = 1


class Provider:
    """Base provider; subclasses decide when a PENDING block launches."""

    def __init__(self, limits: ProviderLimits):
        self.limits = limits
        self.blocks: Dict[str, Block] = {}

    # -- interface ------------------------------------------------------

    def submit_block(self, nodes: int, command: CommandBuilder) -> str:
        if nodes < 1 or nodes > self.limits.nodes_per_block:
            raise ValueError(
                "nodes must be within [1, %d]" % self.limits.nodes_per_block
            )
        block = Block(block_id=uuid.uuid4().hex[:12], nodes=nodes, command=command)
        self.blocks[block.block_id] = block
        log.info("block %s submitted (%d nodes)", block.block_id, nodes)
        return block.block_id

    def status(self, block_id: str) -> BlockState:
        return self.blocks[block_id].state

    def cancel(self, block_id: str):
        block = self.blocks.get(block_id)
        if block is None or block.cancelled:
            return
        block.cancelled = True
        for proc in block.procs:
            try:
                proc.terminate()
            except OSError:
                pass
        if block.state in (BlockState.PENDING, BlockState.RUNNING):
            block.state = BlockState.DONE

    def in_use(self) -> int:
        return sum(
            1
            for b in self.blocks.values()
            if b.state in (BlockState.PENDING, BlockState.RUNNING)
        )

    def upcoming_nodes(self) -> int:
        return sum(
            b.nodes
            for b in self.blocks.values()
            if b.state in (BlockState.PENDING, BlockState.RUNNING)
        )

    def poll(self):
        """Drive pending launches and refresh block states."""
        now = time.time()
        for block in self.blocks.values():
            if block.cancelled:
                continue
            if block.state is BlockState.PENDING and now >= block.launch_at:
                self._launch(block)
            elif block.state is BlockState.RUNNING and block.procs:
                if all(p.poll() is not None for p in block.procs):
                    block.state = BlockState.DONE

    # -- internals ------------------------------------------------------

    def _launch(self, block: Block):
        try:
            for i in range(block.nodes):
                node_id = "%s-n%d" % (block.block_id, i)
                argv = block.command(node_id)
                block.procs.append(
                    subprocess.Popen(argv, stdin=subprocess.DEVNULL, stderr=sys.stderr)
                )
            block.state = BlockState.RUNNING
            log.info("block %s launched", block.block_id)
        except OSError as exc:
            block.state = BlockState.FAILED
            log.error("block %s spawn failed: %s", block.block_id, exc)


class LocalProcessProvider(Provider):
    def submit_block(self, nodes: int, command: CommandBuilder) -> str:
        block_id = super().submit_block(nodes, command)
        self.blocks[block_id].launch_at = 0.0  # immediately eligible
        self.poll()
        return block_id


class SimulatedBatchProvider(Provider):
    """Holds blocks PENDING for a sampled scheduler queue delay."""

    def __init__(self, limits: ProviderLimits, delay: dict, seed: Optional[int] = None):
        super().__init__(limits)
        self.delay = dict(delay or {})
        self.rng = random.Random(seed)

    def _sample_delay(self) -> float:
        kind = self.delay.get("kind", "fixed")
        if kind == "fixed":
            return float(self.delay.get("delay_s", 10.0))
        if kind == "uniform":
            return self.rng.uniform(
                float(self.delay.get("low_s", 0.0)), float(self.delay.get("high_s", 10.0))
            )
        if kind == "exponential":
            return self.rng.expovariate(1.0 / max(1e-9, float(self.delay.get("mean_s", 10.0))))
        raise ValueError("unknown delay kind %r" % kind)

    def submit_block(self, nodes: int, command: CommandBuilder) -> str:
        block_id = super().submit_block(nodes, command)
        self.blocks[block_id].launch_at = time.time() + self._sample_delay()
        return block_id


def make_provider(cfg: dict, seed: Optional[int] = None) -> Provider:
    limits = ProviderLimits(
        min_blocks=int(cfg.get("min_blocks", 0)),
        max_blocks=int(cfg.get("max_blocks", 4)),
        nodes_per_block=int(cfg.get("nodes_per_block", 1)),
    )
    kind = cfg.get("type", "local")
    if kind == "local":
        return LocalProcessProvider(limits)
    if kind == "simulated-batch":
        return SimulatedBatchProvider(limits, cfg.get("queue_delay", {}), seed)
    raise ValueError("unknown provider type %r" % kind)
