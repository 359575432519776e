"""Framed transport over sockets and pipes.

FrameChannel wraps a connected socket: sends are serialized behind a lock,
and an optional reader thread decodes inbound frames and hands them to a
callback. Pipe helpers carry the same frames over file descriptors for the
manager<->worker links.
"""

from __future__ import annotations

import json
import logging
import socket
import threading
from typing import Callable, Optional

from funcfab.core.envelope import CODEC_TEXT, Envelope
from funcfab.wire.frames import (
    DEFAULT_MAX_PAYLOAD,
    Message,
    MessageType,
    StreamDecoder,
    encode_frame,
)

log = logging.getLogger(__name__)

ZERO_CORR = b"\x00" * 16

# Internal links carry JSON metadata plus base64 payloads, so they need
# headroom above the 1 MiB user payload cap.
LINK_MAX_PAYLOAD = 4 * 1024 * 1024


def json_env(obj, routing_tag: bytes = ZERO_CORR) -> Envelope:
    """Envelope for structured control payloads (codec 1)."""
    data = json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return Envelope(CODEC_TEXT, data, routing_tag)


def json_body(msg: Message):
    return json.loads(msg.env.payload.decode("utf-8"))


class ChannelClosed(Exception):
    pass


class FrameChannel:
    """One framed, bidirectional connection."""

    def __init__(self, sock: socket.socket, max_payload: int = LINK_MAX_PAYLOAD):
        self.sock = sock
        self.max_payload = max_payload
        self._send_lock = threading.Lock()
        self._decoder = StreamDecoder(max_payload)
        self._closed = threading.Event()
        self.peername = None
        try:
            self.peername = sock.getpeername()
        except OSError:
            pass

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def send(self, msg_type: MessageType, correlation_id: bytes, env: Envelope):
        frame = encode_frame(msg_type, correlation_id, env, self.max_payload)
        try:
            with self._send_lock:
                self.sock.sendall(frame)
        except OSError as exc:
            self.close()
            raise ChannelClosed(str(exc)) from exc

    def send_json(self, msg_type: MessageType, obj, correlation_id: bytes = ZERO_CORR):
        self.send(msg_type, correlation_id, json_env(obj))

    def start_reader(
        self,
        on_message: Callable[[Message], None],
        on_close: Optional[Callable[[], None]] = None,
        name: str = "frame-reader",
    ) -> threading.Thread:
        """Spawn a daemon thread that decodes inbound frames until EOF."""

        def _deliver(messages):
            for message in messages:
                try:
                    on_message(message)
                except Exception:
                    log.exception("frame handler failed for %s", self.peername)

        def _run():
            try:
                while not self._closed.is_set():
                    try:
                        data = self.sock.recv(65536)
                    except OSError:
                        break
                    if not data:
                        break
                    try:
                        _deliver(self._decoder.feed(data))
                    except Exception:
                        log.warning("dropping malformed frame from %s", self.peername)
                        # Frames decoded before/after the malformed one are
                        # still buffered in the decoder.
                        try:
                            _deliver(self._decoder.feed(b""))
                        except Exception:
                            break
            finally:
                self.close()
                if on_close is not None:
                    on_close()

        thread = threading.Thread(target=_run, name=name, daemon=True)
        thread.start()
        return thread

    def close(self):
        if self._closed.is_set():
            return
        self._closed.set()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


def connect(host: str, port: int, timeout: float = 5.0,
            max_payload: int = LINK_MAX_PAYLOAD) -> FrameChannel:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return FrameChannel(sock, max_payload)


def write_pipe_frame(fp, msg_type: MessageType, correlation_id: bytes, env: Envelope,
                     max_payload: int = LINK_MAX_PAYLOAD):
    fp.write(encode_frame(msg_type, correlation_id, env, max_payload))
    fp.flush()


def read_pipe_frames(fp, max_payload: int = LINK_MAX_PAYLOAD):
    """Yield messages from a blocking binary stream until EOF."""
    decoder = StreamDecoder(max_payload)
    while True:
        data = fp.read1(65536) if hasattr(fp, "read1") else fp.read(65536)
        if not data:
            return
        for message in decoder.feed(data):
            yield message
