"""Endpoint agent configuration.

YAML file keys:

    coordinator_url:   http://host:port of the coordinator API
    token:             bearer token for registration and the agent link
    endpoint_id:       optional pinned 128-bit id (re-registration reuses queues)
    endpoint_name:     descriptive name
    workdir:           pidfile, endpoint-id state, metrics.jsonl, sandboxes
    manager_listen:    {host, port} the agent listens on for managers (0 = ephemeral)
    provider:          {type: local|simulated-batch, nodes_per_block, min_blocks,
                        max_blocks, queue_delay: {kind, ...}}
    workers_per_node:  worker slots per manager
    default_tags:      tags whose workers managers pre-launch
    tags:              {tag: {sandbox: {...}, min_workers, max_workers}}
    prefetch_count:    tasks dispatched beyond idle capacity (default workers_per_node)
    executor_batching: aggregate adverts + multi-task dispatch frames (default true)
    heartbeat:         {interval, miss_threshold} for manager links
    warm_ttl_s:        idle worker lifetime
    idle_timeout_s:    idle manager lifetime before scale-down
    scaler_interval_s: scaling loop cadence
    rng_seed:          scheduler RNG seed (default: entropy)
    reconnect:         {base_s, cap_s} exponential backoff to the coordinator
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import yaml

from funcfab.wire.heartbeat import HeartbeatConfig


@dataclass
class TagPolicy:
    sandbox: dict = field(default_factory=dict)
    min_workers: int = 0
    max_workers: Optional[int] = None


@dataclass
class AgentConfig:
    coordinator_url: str
    token: str
    workdir: str
    endpoint_id: Optional[str] = None
    endpoint_name: str = ""
    manager_host: str = "127.0.0.1"
    manager_port: int = 0
    provider: dict = field(default_factory=lambda: {"type": "local"})
    workers_per_node: int = 8
    default_tags: List[str] = field(default_factory=lambda: ["default"])
    tags: Dict[str, TagPolicy] = field(default_factory=dict)
    prefetch_count: Optional[int] = None
    executor_batching: bool = True
    advert_min_interval_s: float = 0.0
    heartbeat: HeartbeatConfig = field(default_factory=HeartbeatConfig)
    warm_ttl_s: float = 300.0
    idle_timeout_s: float = 30.0
    scaler_interval_s: float = 1.0
    rng_seed: Optional[int] = None
    reconnect_base_s: float = 1.0
    reconnect_cap_s: float = 30.0

    @property
    def effective_prefetch(self) -> int:
        if self.prefetch_count is None:
            return self.workers_per_node
        return self.prefetch_count

    @classmethod
    def from_dict(cls, data: dict) -> "AgentConfig":
        listen = data.get("manager_listen", {})
        hb = data.get("heartbeat", {})
        rec = data.get("reconnect", {})
        tags = {}
        for tag, policy in (data.get("tags") or {}).items():
            policy = policy or {}
            tags[tag] = TagPolicy(
                sandbox=dict(policy.get("sandbox", {})),
                min_workers=int(policy.get("min_workers", 0)),
                max_workers=policy.get("max_workers"),
            )
        for tag in data.get("default_tags", ["default"]):
            tags.setdefault(tag, TagPolicy())
        return cls(
            coordinator_url=data["coordinator_url"].rstrip("/"),
            token=data["token"],
            workdir=data.get("workdir", "."),
            endpoint_id=data.get("endpoint_id"),
            endpoint_name=data.get("endpoint_name", ""),
            manager_host=listen.get("host", "127.0.0.1"),
            manager_port=int(listen.get("port", 0)),
            provider=dict(data.get("provider", {"type": "local"})),
            workers_per_node=int(data.get("workers_per_node", 8)),
            default_tags=list(data.get("default_tags", ["default"])),
            tags=tags,
            prefetch_count=data.get("prefetch_count"),
            executor_batching=bool(data.get("executor_batching", True)),
            advert_min_interval_s=float(data.get("advert_min_interval_s", 0.0)),
            heartbeat=HeartbeatConfig(
                interval=float(hb.get("interval", 1.0)),
                miss_threshold=int(hb.get("miss_threshold", 3)),
            ),
            warm_ttl_s=float(data.get("warm_ttl_s", 300.0)),
            idle_timeout_s=float(data.get("idle_timeout_s", 30.0)),
            scaler_interval_s=float(data.get("scaler_interval_s", 1.0)),
            rng_seed=data.get("rng_seed"),
            reconnect_base_s=float(rec.get("base_s", 1.0)),
            reconnect_cap_s=float(rec.get("cap_s", 30.0)),
        )

    @classmethod
    def from_file(cls, path: str) -> "AgentConfig":
        with open(path, "r", encoding="utf-8") as fp:
            return cls.from_dict(yaml.safe_load(fp) or {})
