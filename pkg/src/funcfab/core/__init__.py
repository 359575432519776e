"""Domain types and pure operations shared by every other subsystem."""

from funcfab.core.batching import BatchSpec, InvalidSpec, partition, partition_sizes
from funcfab.core.envelope import (
    CODEC_BINARY,
    CODEC_RAW,
    CODEC_TEXT,
    CorruptPayload,
    Envelope,
    SerializationError,
    UnknownCodec,
    deserialize,
    serialize,
)
from funcfab.core.lifecycle import (
    IllegalTransition,
    LifecycleEvent,
    TaskState,
    advance_state,
    declared_edges,
    transition,
)
from funcfab.core.memo import MemoKey, memo_key
from funcfab.core.model import (
    FunctionRecord,
    Runtime,
    TaskError,
    TaskRecord,
    TimingBreakdown,
    new_id,
)

__all__ = [
    "BatchSpec",
    "InvalidSpec",
    "partition",
    "partition_sizes",
    "CODEC_RAW",
    "CODEC_TEXT",
    "CODEC_BINARY",
    "Envelope",
    "SerializationError",
    "UnknownCodec",
    "CorruptPayload",
    "serialize",
    "deserialize",
    "TaskState",
    "LifecycleEvent",
    "IllegalTransition",
    "transition",
    "advance_state",
    "declared_edges",
    "MemoKey",
    "memo_key",
    "FunctionRecord",
    "TaskRecord",
    "TaskError",
    "TimingBreakdown",
    "Runtime",
    "new_id",
]
