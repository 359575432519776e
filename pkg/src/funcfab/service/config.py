"""Coordinator configuration.

YAML file keys:

    listen:            {host, port}          HTTP API bind address (port 0 = ephemeral)
    db_path:           path                  durable store location
    tokens:            {token: principal}    static bearer-token map
    payload_cap_bytes: int                   max function body / input / result size
    purge:             {grace_s, interval_s} retrieved-result purging
    heartbeat:         {interval, miss_threshold}
    forwarder:         {host, dispatch_chunk}
    link_frame_cap:    int                   frame payload cap on agent links
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import yaml

from funcfab.wire.heartbeat import HeartbeatConfig

DEFAULT_PAYLOAD_CAP = 1024 * 1024
DEFAULT_LINK_FRAME_CAP = 4 * 1024 * 1024


@dataclass
class CoordinatorConfig:
    host: str = "127.0.0.1"
    port: int = 0
    db_path: str = "coordinator.db"
    tokens: Dict[str, str] = field(default_factory=dict)
    payload_cap: int = DEFAULT_PAYLOAD_CAP
    purge_grace_s: float = 600.0
    purge_interval_s: float = 30.0
    heartbeat: HeartbeatConfig = field(default_factory=HeartbeatConfig)
    forwarder_host: str = "127.0.0.1"
    dispatch_chunk: int = 64
    link_frame_cap: int = DEFAULT_LINK_FRAME_CAP

    @classmethod
    def from_dict(cls, data: dict) -> "CoordinatorConfig":
        listen = data.get("listen", {})
        purge = data.get("purge", {})
        hb = data.get("heartbeat", {})
        fwd = data.get("forwarder", {})
        return cls(
            host=listen.get("host", "127.0.0.1"),
            port=int(listen.get("port", 0)),
            db_path=data.get("db_path", "coordinator.db"),
            tokens=dict(data.get("tokens", {})),
            payload_cap=int(data.get("payload_cap_bytes", DEFAULT_PAYLOAD_CAP)),
            purge_grace_s=float(purge.get("grace_s", 600.0)),
            purge_interval_s=float(purge.get("interval_s", 30.0)),
            heartbeat=HeartbeatConfig(
                interval=float(hb.get("interval", 1.0)),
                miss_threshold=int(hb.get("miss_threshold", 3)),
            ),
            forwarder_host=fwd.get("host", "127.0.0.1"),
            dispatch_chunk=int(fwd.get("dispatch_chunk", 64)),
            link_frame_cap=int(data.get("link_frame_cap", DEFAULT_LINK_FRAME_CAP)),
        )

    @classmethod
    def from_file(cls, path: str) -> "CoordinatorConfig":
        with open(path, "r", encoding="utf-8") as fp:
            data = yaml.safe_load(fp) or {}
        return cls.from_dict(data)
