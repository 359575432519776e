"""Greedy randomized container-affinity routing.

Two tiers. Tier A: managers that already run a worker of the task's tag and
have dispatch credit left from their latest capacity advertisement. Tier B:
managers with a spare slot that may cold-deploy the tag. Within a tier the
pick is uniform at random from a seedable RNG; tier A always wins over tier
B, so a warm worker is never passed over for a cold deployment. Returns
None (no capacity) when both tiers are empty, leaving the task queued for
the scaler to notice.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

STATUS_ACTIVE = "ACTIVE"
STATUS_SUSPENDED = "SUSPENDED"
STATUS_LOST = "LOST"


@dataclass
class CandidateView:
    """Scheduling-relevant slice of a manager's state."""

    manager_id: str
    status: str = STATUS_ACTIVE
    deployed: Dict[str, int] = field(default_factory=dict)  # tag -> live workers
    credit: Dict[str, int] = field(default_factory=dict)    # tag -> advert credit
    idle: Dict[str, int] = field(default_factory=dict)      # tag -> idle workers
    slots_free: int = 0
    new_tag: Optional[str] = None  # tag cold-started this advert cycle, if any

    def warm_eligible(self, tag: str) -> bool:
        return (
            self.status == STATUS_ACTIVE
            and self.deployed.get(tag, 0) > 0
            and self.credit.get(tag, 0) > 0
        )

    def _deployable(self, tag: str) -> bool:
        if self.slots_free > 0:
            return True
        # no empty slot, but an idle worker of another tag can be recycled
        return any(n > 0 for t, n in self.idle.items() if t != tag)

    def cold_eligible(self, tag: str) -> bool:
        if self.status != STATUS_ACTIVE or not self._deployable(tag):
            return False
        if self.deployed.get(tag, 0) > 0:
            return True
        # at most one new container tag per advertisement cycle
        return self.new_tag is None or self.new_tag == tag


def schedule(
    tag: str,
    candidates: Sequence[CandidateView],
    rng: random.Random,
    allow_deploy: bool = True,
) -> Optional[Tuple[str, bool]]:
    """Pick a manager for a task of ``tag``.

    Returns (manager_id, deploy) where deploy=True means the pick expects an
    on-demand worker deployment, or None when no manager has capacity.
    ``allow_deploy=False`` suppresses tier B, used when the tag is at its
    worker ceiling.
    """
    warm = [c for c in candidates if c.warm_eligible(tag)]
    if warm:
        return rng.choice(warm).manager_id, False
    if not allow_deploy:
        return None
    cold = [c for c in candidates if c.cold_eligible(tag)]
    if cold:
        return rng.choice(cold).manager_id, True
    return None
