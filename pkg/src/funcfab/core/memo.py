"""Content-addressed memoization keys.

A memo key is a SHA-256 digest over the function body and the input envelope
exactly as submitted. Every field is length-prefixed before hashing so that
(body="f", input="ab") and (body="fa", input="b") can never collide by
shifting bytes across the boundary. The key deliberately excludes task ids,
endpoints, and timestamps: equal bytes in means equal key out.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from funcfab.core.envelope import Envelope

_LEN = struct.Struct(">Q")


@dataclass(frozen=True)
class MemoKey:
    digest: bytes

    def __post_init__(self):
        if len(self.digest) != 32:
            raise ValueError("memo digest must be 32 bytes")

    @property
    def hex(self) -> str:
        return self.digest.hex()


def memo_key(body: bytes, input_env: Envelope) -> MemoKey:
    """Derive the memoization key for a (function body, input) pair."""
    h = hashlib.sha256()
    h.update(_LEN.pack(len(body)))
    h.update(body)
    h.update(bytes([input_env.codec_id]))
    h.update(_LEN.pack(len(input_env.payload)))
    h.update(input_env.payload)
    return MemoKey(h.digest())
