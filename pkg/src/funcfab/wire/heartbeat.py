"""Liveness tracking over heartbeat timestamps.

Any inbound frame from a peer counts as liveness, not just HEARTBEAT; busy
links never need extra heartbeat traffic. A peer is lost once the silence
exceeds interval * miss_threshold, and stays lost until a new frame lands.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Set


@dataclass(frozen=True)
class HeartbeatConfig:
    interval: float = 1.0
    miss_threshold: int = 3

    def __post_init__(self):
        if self.interval <= 0:
            raise ValueError("heartbeat interval must be > 0")
        if self.miss_threshold < 1:
            raise ValueError("miss_threshold must be >= 1")

    @property
    def deadline(self) -> float:
        return self.interval * self.miss_threshold


def lost_peers(last_seen: Mapping, now: float, cfg: HeartbeatConfig) -> Set:
    """Peers whose last inbound frame is older than the loss deadline."""
    limit = cfg.deadline
    return {peer for peer, seen in last_seen.items() if now - seen > limit}
