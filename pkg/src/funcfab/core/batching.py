"""Partitioning of task input streams into batches.

Two knobs: ``batch_size`` caps the number of items per batch, ``batch_count``
fixes the number of batches. When both are set, batch_count governs. With
only batch_size set, the input may be an unbounded iterator and is consumed
one batch at a time; batch_count needs the element count, so unsized
iterables are materialized first.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Sequence


class InvalidSpec(Exception):
    """Batch spec has no fields set, or a field below 1."""


@dataclass(frozen=True)
class BatchSpec:
    batch_size: Optional[int] = None
    batch_count: Optional[int] = None

    def validate(self) -> "BatchSpec":
        if self.batch_size is None and self.batch_count is None:
            raise InvalidSpec("one of batch_size or batch_count must be set")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidSpec("batch_size must be >= 1, got %r" % self.batch_size)
        if self.batch_count is not None and self.batch_count < 1:
            raise InvalidSpec("batch_count must be >= 1, got %r" % self.batch_count)
        return self


def partition_sizes(n: int, spec: BatchSpec) -> List[int]:
    """Batch sizes that partitioning ``n`` items under ``spec`` produces.

    With batch_count=c the split is as even as possible, larger batches
    first: the first n % c batches get one extra item. Empty batches are
    never produced, so fewer than c batches come back when n < c.
    """
    spec.validate()
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return []
    if spec.batch_count is not None:
        c = spec.batch_count
        q, r = divmod(n, c)
        sizes = [q + 1] * r + [q] * (c - r)
        return [s for s in sizes if s > 0]
    k = spec.batch_size
    full, rem = divmod(n, k)
    return [k] * full + ([rem] if rem else [])


def partition(items: Iterable, spec: BatchSpec) -> Iterator[list]:
    """Partition ``items`` into batches per ``spec``, preserving order.

    Yields lists. Never yields an empty batch. The batch_size path holds at
    most one batch in memory at a time.
    """
    spec.validate()
    if spec.batch_count is not None:
        if isinstance(items, Sequence):
            n = len(items)
            it = iter(items)
        else:
            items = list(items)
            n = len(items)
            it = iter(items)
        for size in partition_sizes(n, spec):
            yield list(itertools.islice(it, size))
        return
    it = iter(items)
    while True:
        batch = list(itertools.islice(it, spec.batch_size))
        if not batch:
            return
        yield batch
