import random

import pytest

from funcfab.core.envelope import Envelope
from funcfab.wire.frames import (
    NEED_MORE,
    BadVersion,
    FrameTooLarge,
    Message,
    MessageType,
    StreamDecoder,
    UnknownMessageType,
    decode_frame,
    encode_frame,
)


def random_message(rng):
    corr = rng.randbytes(16)
    payload = rng.randbytes(rng.randrange(0, 200))
    codec = rng.randrange(3)
    msg_type = rng.choice(list(MessageType))
    return Message(msg_type, corr, Envelope(codec, payload, routing_tag=corr))


def test_heartbeat_frame_exact_bytes():
    frame = encode_frame(MessageType.HEARTBEAT, b"\x00" * 16, Envelope(0, b""))
    assert len(frame) == 23
    assert frame == b"\x00\x00\x00\x13" + b"\x01" + b"\x03" + b"\x00" * 16 + b"\x00"


def test_round_trip_random_messages():
    rng = random.Random(1)
    for _ in range(1000):
        msg = random_message(rng)
        frame = encode_frame(msg.msg_type, msg.correlation_id, msg.env)
        decoded, rest = decode_frame(frame)
        assert rest == b""
        assert decoded == msg


def test_payload_cap():
    big = Envelope(0, b"\x00" * (1024 * 1024 + 1))
    with pytest.raises(FrameTooLarge):
        encode_frame(MessageType.TASK_DISPATCH, b"\x00" * 16, big)
    # exactly at the cap is fine
    ok = Envelope(0, b"\x00" * (1024 * 1024))
    frame = encode_frame(MessageType.TASK_DISPATCH, b"\x00" * 16, ok)
    decoded, _ = decode_frame(frame)
    assert len(decoded.env.payload) == 1024 * 1024


def test_need_more_bytes():
    assert decode_frame(b"\x00\x00\x00") is NEED_MORE
    frame = encode_frame(MessageType.HEARTBEAT, b"\x00" * 16, Envelope(0, b"abc"))
    assert decode_frame(frame[:-1]) is NEED_MORE


def test_bad_version():
    frame = bytearray(encode_frame(MessageType.HEARTBEAT, b"\x00" * 16, Envelope(0, b"")))
    frame[4] = 0x02
    with pytest.raises(BadVersion) as exc_info:
        decode_frame(bytes(frame))
    assert exc_info.value.version == 0x02
    assert exc_info.value.consumed == len(frame)


def test_unknown_message_type():
    frame = bytearray(encode_frame(MessageType.HEARTBEAT, b"\x00" * 16, Envelope(0, b"")))
    frame[5] = 0x7F
    with pytest.raises(UnknownMessageType) as exc_info:
        decode_frame(bytes(frame))
    assert exc_info.value.code == 0x7F


def test_concatenated_frames_decode_exactly():
    rng = random.Random(2)
    msgs = [random_message(rng) for _ in range(10)]
    stream = b"".join(encode_frame(m.msg_type, m.correlation_id, m.env) for m in msgs)
    out = []
    while stream:
        decoded, stream = decode_frame(stream)
        out.append(decoded)
    assert out == msgs


def test_streaming_reassembly_random_segmentation():
    # oracle: 50 concatenated random frames fed in random-sized reads come
    # back as the same 50 messages
    rng = random.Random(3)
    for _trial in range(20):
        msgs = [random_message(rng) for _ in range(50)]
        stream = b"".join(
            encode_frame(m.msg_type, m.correlation_id, m.env) for m in msgs
        )
        decoder = StreamDecoder()
        out = []
        pos = 0
        while pos < len(stream):
            step = rng.randrange(1, 97)
            out.extend(decoder.feed(stream[pos : pos + step]))
            pos += step
        assert out == msgs


def test_stream_decoder_survives_malformed_frame():
    rng = random.Random(4)
    good1 = random_message(rng)
    good2 = random_message(rng)
    bad = bytearray(encode_frame(MessageType.HEARTBEAT, b"\x00" * 16, Envelope(0, b"zz")))
    bad[4] = 0x09
    stream = (
        encode_frame(good1.msg_type, good1.correlation_id, good1.env)
        + bytes(bad)
        + encode_frame(good2.msg_type, good2.correlation_id, good2.env)
    )
    decoder = StreamDecoder()
    with pytest.raises(BadVersion):
        decoder.feed(stream)
    # the bad frame was consumed; the rest of the stream decodes
    assert decoder.feed(b"") == [good1, good2]


def test_correlation_id_length_enforced():
    with pytest.raises(ValueError):
        encode_frame(MessageType.HEARTBEAT, b"\x00" * 8, Envelope(0, b""))
