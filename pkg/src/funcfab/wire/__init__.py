"""Bit-exact framing and message vocabulary for fabric control links."""

from funcfab.wire.frames import (
    BadVersion,
    FrameTooLarge,
    Message,
    MessageType,
    NEED_MORE,
    PROTOCOL_VERSION,
    StreamDecoder,
    UnknownMessageType,
    decode_frame,
    encode_frame,
)
from funcfab.wire.heartbeat import HeartbeatConfig, lost_peers

__all__ = [
    "MessageType",
    "Message",
    "PROTOCOL_VERSION",
    "NEED_MORE",
    "encode_frame",
    "decode_frame",
    "StreamDecoder",
    "BadVersion",
    "UnknownMessageType",
    "FrameTooLarge",
    "HeartbeatConfig",
    "lost_peers",
]
