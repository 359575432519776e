"""Codec-tagged payload envelopes.

Every payload that crosses a process boundary travels as an Envelope: a
one-byte codec id, a 16-byte routing tag, and the encoded bytes. Codecs are
tried in registry order (fastest first) until one accepts the value, and the
winning codec's id is recorded in the envelope so the receiving side can
decode without guessing.

Codecs:
  0  raw        -- byte strings pass through untouched
  1  text       -- JSON-compatible values as compact UTF-8 JSON
  2  binary     -- tag-length-value binary encoding of the JSON data model
                   extended with byte strings
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

CODEC_RAW = 0
CODEC_TEXT = 1
CODEC_BINARY = 2

ZERO_TAG = b"\x00" * 16


class SerializationError(Exception):
    """No codec in the registry accepted the value."""

    def __init__(self, value, tried):
        self.tried = list(tried)
        super().__init__(
            "no codec accepted value of type %s (tried codecs %s)"
            % (type(value).__name__, self.tried)
        )


class UnknownCodec(Exception):
    def __init__(self, codec_id):
        self.codec_id = codec_id
        super().__init__("unknown codec id %r" % (codec_id,))


class CorruptPayload(Exception):
    """The codec named in the header rejected the payload bytes."""


@dataclass(frozen=True)
class Envelope:
    """Serialized buffer plus the header needed to route and decode it."""

    codec_id: int
    payload: bytes
    routing_tag: bytes = field(default=ZERO_TAG)

    def __post_init__(self):
        if not isinstance(self.payload, (bytes, bytearray)):
            raise TypeError("payload must be bytes")
        if len(self.routing_tag) != 16:
            raise ValueError("routing_tag must be exactly 16 bytes")
        if not 0 <= self.codec_id <= 255:
            raise ValueError("codec_id must fit in one byte")

    def with_tag(self, tag: bytes) -> "Envelope":
        return Envelope(self.codec_id, self.payload, tag)


def _json_compatible(value, _depth=0) -> bool:
    if _depth > 64:
        return False
    if value is None or isinstance(value, (bool, str)):
        return True
    if isinstance(value, int):
        return True
    if isinstance(value, float):
        return math.isfinite(value)
    if isinstance(value, (list, tuple)):
        return all(_json_compatible(v, _depth + 1) for v in value)
    if isinstance(value, dict):
        return all(
            isinstance(k, str) and _json_compatible(v, _depth + 1)
            for k, v in value.items()
        )
    return False


class _RawCodec:
    codec_id = CODEC_RAW

    @staticmethod
    def accepts(value) -> bool:
        return isinstance(value, (bytes, bytearray))

    @staticmethod
    def encode(value) -> bytes:
        return bytes(value)

    @staticmethod
    def decode(payload: bytes):
        return payload


class _TextCodec:
    codec_id = CODEC_TEXT

    @staticmethod
    def accepts(value) -> bool:
        return _json_compatible(value)

    @staticmethod
    def encode(value) -> bytes:
        # Compact separators so client libraries in other languages can
        # produce byte-identical encodings.
        return json.dumps(
            value, separators=(",", ":"), ensure_ascii=False, allow_nan=False
        ).encode("utf-8")

    @staticmethod
    def decode(payload: bytes):
        try:
            return json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptPayload("text codec rejected payload: %s" % exc) from exc


# Binary codec wire tags. One byte each, followed by a fixed-width or
# length-prefixed body.
_B_NONE = b"N"
_B_TRUE = b"T"
_B_FALSE = b"F"
_B_INT = b"i"
_B_FLOAT = b"d"
_B_STR = b"s"
_B_BYTES = b"b"
_B_LIST = b"l"
_B_MAP = b"m"

_U32 = struct.Struct(">I")
_F64 = struct.Struct(">d")


def _binary_compatible(value, _depth=0) -> bool:
    if _depth > 64:
        return False
    if value is None or isinstance(value, (bool, str, bytes, bytearray)):
        return True
    if isinstance(value, int):
        return True
    if isinstance(value, float):
        return not math.isnan(value)
    if isinstance(value, (list, tuple)):
        return all(_binary_compatible(v, _depth + 1) for v in value)
    if isinstance(value, dict):
        return all(
            isinstance(k, str) and _binary_compatible(v, _depth + 1)
            for k, v in value.items()
        )
    return False


def _binary_encode(value, out: bytearray):
    if value is None:
        out += _B_NONE
    elif value is True:
        out += _B_TRUE
    elif value is False:
        out += _B_FALSE
    elif isinstance(value, int):
        raw = value.to_bytes((value.bit_length() + 8) // 8 or 1, "big", signed=True)
        out += _B_INT
        out += _U32.pack(len(raw))
        out += raw
    elif isinstance(value, float):
        out += _B_FLOAT
        out += _F64.pack(value)
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out += _B_STR
        out += _U32.pack(len(raw))
        out += raw
    elif isinstance(value, (bytes, bytearray)):
        out += _B_BYTES
        out += _U32.pack(len(value))
        out += value
    elif isinstance(value, (list, tuple)):
        out += _B_LIST
        out += _U32.pack(len(value))
        for item in value:
            _binary_encode(item, out)
    elif isinstance(value, dict):
        out += _B_MAP
        out += _U32.pack(len(value))
        for key, item in value.items():
            kraw = key.encode("utf-8")
            out += _U32.pack(len(kraw))
            out += kraw
            _binary_encode(item, out)
    else:  # pragma: no cover - accepts() screens this out
        raise TypeError("binary codec cannot encode %r" % type(value))


def _binary_decode(buf: memoryview, pos: int):
    if pos >= len(buf):
        raise CorruptPayload("binary payload truncated")
    tag = bytes(buf[pos : pos + 1])
    pos += 1
    if tag == _B_NONE:
        return None, pos
    if tag == _B_TRUE:
        return True, pos
    if tag == _B_FALSE:
        return False, pos
    if tag == _B_FLOAT:
        if pos + 8 > len(buf):
            raise CorruptPayload("binary payload truncated in float")
        return _F64.unpack_from(buf, pos)[0], pos + 8
    if tag in (_B_INT, _B_STR, _B_BYTES):
        if pos + 4 > len(buf):
            raise CorruptPayload("binary payload truncated in length")
        (n,) = _U32.unpack_from(buf, pos)
        pos += 4
        if pos + n > len(buf):
            raise CorruptPayload("binary payload truncated in body")
        raw = bytes(buf[pos : pos + n])
        pos += n
        if tag == _B_INT:
            return int.from_bytes(raw, "big", signed=True), pos
        if tag == _B_STR:
            try:
                return raw.decode("utf-8"), pos
            except UnicodeDecodeError as exc:
                raise CorruptPayload("invalid UTF-8 in string") from exc
        return raw, pos
    if tag == _B_LIST:
        if pos + 4 > len(buf):
            raise CorruptPayload("binary payload truncated in list header")
        (n,) = _U32.unpack_from(buf, pos)
        pos += 4
        items = []
        for _ in range(n):
            item, pos = _binary_decode(buf, pos)
            items.append(item)
        return items, pos
    if tag == _B_MAP:
        if pos + 4 > len(buf):
            raise CorruptPayload("binary payload truncated in map header")
        (n,) = _U32.unpack_from(buf, pos)
        pos += 4
        result = {}
        for _ in range(n):
            if pos + 4 > len(buf):
                raise CorruptPayload("binary payload truncated in key length")
            (klen,) = _U32.unpack_from(buf, pos)
            pos += 4
            if pos + klen > len(buf):
                raise CorruptPayload("binary payload truncated in key")
            try:
                key = bytes(buf[pos : pos + klen]).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CorruptPayload("invalid UTF-8 in map key") from exc
            pos += klen
            item, pos = _binary_decode(buf, pos)
            result[key] = item
        return result, pos
    raise CorruptPayload("unknown binary tag %r" % tag)


class _BinaryCodec:
    codec_id = CODEC_BINARY

    @staticmethod
    def accepts(value) -> bool:
        return _binary_compatible(value)

    @staticmethod
    def encode(value) -> bytes:
        out = bytearray()
        _binary_encode(value, out)
        return bytes(out)

    @staticmethod
    def decode(payload: bytes):
        value, pos = _binary_decode(memoryview(payload), 0)
        if pos != len(payload):
            raise CorruptPayload("trailing bytes after binary value")
        return value


_CODECS = {
    CODEC_RAW: _RawCodec,
    CODEC_TEXT: _TextCodec,
    CODEC_BINARY: _BinaryCodec,
}

# Priority order: raw passthrough is cheapest, JSON text next, then the
# general binary encoding.
DEFAULT_REGISTRY = (CODEC_RAW, CODEC_TEXT, CODEC_BINARY)


def serialize(value, registry=DEFAULT_REGISTRY, routing_tag: bytes = ZERO_TAG) -> Envelope:
    """Encode ``value`` with the first codec in ``registry`` that accepts it."""
    if not registry:
        raise ValueError("codec registry must not be empty")
    tried = []
    for codec_id in registry:
        codec = _CODECS.get(codec_id)
        if codec is None:
            raise UnknownCodec(codec_id)
        tried.append(codec_id)
        if codec.accepts(value):
            return Envelope(codec_id, codec.encode(value), routing_tag)
    raise SerializationError(value, tried)


def deserialize(env: Envelope):
    """Decode an envelope back to the value its producer encoded."""
    codec = _CODECS.get(env.codec_id)
    if codec is None:
        raise UnknownCodec(env.codec_id)
    return codec.decode(bytes(env.payload))
