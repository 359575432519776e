"""Length-prefixed binary frames.

Layout, all integers big-endian:

    length          4 bytes   byte count of everything after this field
    version         1 byte    must be 0x01
    msg_type        1 byte    one of MessageType
    correlation_id  16 bytes  routing tag; zeroes when unused
    codec_id        1 byte    codec of the payload
    payload         length - 19 bytes

A frame is self-delimiting, so any concatenation of valid frames decodes to
exactly its constituent messages regardless of how the byte stream is
segmented. Payload bytes pass through bit-exact; this layer never interprets
them.
"""

from __future__ import annotations

import enum
import struct
from typing import NamedTuple, Tuple, Union

from funcfab.core.envelope import Envelope

PROTOCOL_VERSION = 0x01
HEADER_AFTER_LENGTH = 19  # version + msg_type + correlation_id + codec_id
DEFAULT_MAX_PAYLOAD = 1024 * 1024

_LENGTH = struct.Struct(">I")
_HEADER = struct.Struct(">BB16sB")


class MessageType(enum.IntEnum):
    REGISTER_AGENT = 0x01
    REGISTER_ACK = 0x02
    HEARTBEAT = 0x03
    HEARTBEAT_ACK = 0x04
    TASK_DISPATCH = 0x05
    TASK_RESULT = 0x06
    CAPACITY_ADVERT = 0x07
    REGISTER_MANAGER = 0x08
    SUSPEND_MANAGER = 0x09
    SHUTDOWN_MANAGER = 0x0A
    TASK_ACK = 0x0B


class Message(NamedTuple):
    msg_type: MessageType
    correlation_id: bytes
    env: Envelope


class _NeedMore:
    """Sentinel: not enough bytes buffered for a whole frame."""

    __slots__ = ()

    def __repr__(self):
        return "NEED_MORE"


NEED_MORE = _NeedMore()


class FrameTooLarge(Exception):
    def __init__(self, size: int, cap: int):
        self.size = size
        self.cap = cap
        self.consumed = 0
        super().__init__("payload of %d bytes exceeds frame cap %d" % (size, cap))


class BadVersion(Exception):
    def __init__(self, version: int):
        self.version = version
        self.consumed = 0
        super().__init__("unsupported frame version 0x%02x" % version)


class UnknownMessageType(Exception):
    def __init__(self, code: int):
        self.code = code
        self.consumed = 0
        super().__init__("unknown message type 0x%02x" % code)


def encode_frame(
    msg_type: MessageType,
    correlation_id: bytes,
    env: Envelope,
    max_payload: int = DEFAULT_MAX_PAYLOAD,
) -> bytes:
    """Emit the exact length+4 bytes of one frame."""
    if len(correlation_id) != 16:
        raise ValueError("correlation_id must be 16 bytes")
    payload = env.payload
    if len(payload) > max_payload:
        raise FrameTooLarge(len(payload), max_payload)
    length = HEADER_AFTER_LENGTH + len(payload)
    return b"".join(
        (
            _LENGTH.pack(length),
            _HEADER.pack(PROTOCOL_VERSION, int(msg_type), correlation_id, env.codec_id),
            payload,
        )
    )


def _decode_at(view: memoryview, pos: int, max_payload: int):
    """Decode one frame starting at ``pos``. Returns (message, next_pos) or
    NEED_MORE. Malformed frames raise with ``consumed`` set to the number of
    bytes the caller should skip."""
    avail = len(view) - pos
    if avail < 4:
        return NEED_MORE
    (length,) = _LENGTH.unpack_from(view, pos)
    if length < HEADER_AFTER_LENGTH:
        exc = UnknownMessageType(-1)
        exc.consumed = 0
        raise exc
    if length - HEADER_AFTER_LENGTH > max_payload:
        # Cannot cheaply resync past an oversized frame; sever the stream.
        raise FrameTooLarge(length - HEADER_AFTER_LENGTH, max_payload)
    total = 4 + length
    if avail < total:
        return NEED_MORE
    version, code, correlation_id, codec_id = _HEADER.unpack_from(view, pos + 4)
    if version != PROTOCOL_VERSION:
        exc = BadVersion(version)
        exc.consumed = total
        raise exc
    try:
        msg_type = MessageType(code)
    except ValueError:
        exc = UnknownMessageType(code)
        exc.consumed = total
        raise exc from None
    payload = bytes(view[pos + 4 + _HEADER.size : pos + total])
    env = Envelope(codec_id, payload, routing_tag=correlation_id)
    return Message(msg_type, correlation_id, env), pos + total


def decode_frame(
    buf: Union[bytes, bytearray, memoryview],
    max_payload: int = DEFAULT_MAX_PAYLOAD,
) -> Union[_NeedMore, Tuple[Message, bytes]]:
    """Decode one frame from the head of ``buf``.

    Returns NEED_MORE when the buffer holds less than a full frame, else
    (message, remaining_bytes). Bad version / unknown message type raise
    after consuming the declared length (``exc.consumed`` bytes); an
    oversized declared payload raises FrameTooLarge without consuming.
    """
    decoded = _decode_at(memoryview(buf), 0, max_payload)
    if decoded is NEED_MORE:
        return NEED_MORE
    message, end = decoded
    return message, bytes(memoryview(buf)[end:])


class StreamDecoder:
    """Incremental decoder for one connection; not safe to share."""

    def __init__(self, max_payload: int = DEFAULT_MAX_PAYLOAD):
        self._buf = bytearray()
        self._max_payload = max_payload
        self._pending = []

    def feed(self, data: bytes):
        """Buffer ``data`` and return every complete message now available.

        On a malformed frame the offending frame is consumed and its error
        raised; messages decoded before it are returned by the next feed()
        call (feed(b"") drains them).
        """
        self._buf += data
        messages = self._pending
        self._pending = []
        view = memoryview(bytes(self._buf))
        pos = 0
        try:
            while True:
                decoded = _decode_at(view, pos, self._max_payload)
                if decoded is NEED_MORE:
                    break
                message, pos = decoded
                messages.append(message)
        except (BadVersion, UnknownMessageType, FrameTooLarge) as exc:
            pos += getattr(exc, "consumed", 0)
            del self._buf[:pos]
            self._pending = messages
            raise
        del self._buf[:pos]
        return messages
