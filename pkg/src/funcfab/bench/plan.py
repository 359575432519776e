"""Experiment plans.

A plan is a YAML file naming the experiment kind plus its workload,
topology, knobs, fault schedule, and sweep axes. Plans shipped under
``plans/`` reproduce the reference experiments at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import yaml

EXPERIMENTS = (
    "soak",
    "fault",
    "latency",
    "scaling",
    "memo_sweep",
    "executor_batching",
    "user_batching",
    "prefetch_sweep",
    "elasticity",
)


class InvalidPlan(Exception):
    pass


@dataclass
class ExperimentPlan:
    experiment: str
    name: str = ""
    seed: Optional[int] = None
    workload: dict = field(default_factory=dict)
    topology: dict = field(default_factory=dict)
    knobs: dict = field(default_factory=dict)
    faults: List[dict] = field(default_factory=list)
    sweep: dict = field(default_factory=dict)

    def validate(self) -> "ExperimentPlan":
        if self.experiment not in EXPERIMENTS:
            raise InvalidPlan("unknown experiment kind %r" % self.experiment)
        count = self.workload.get("count")
        if count is not None and count < 1:
            raise InvalidPlan("workload.count must be positive")
        for key in ("nodes", "workers_per_node", "endpoints"):
            value = self.topology.get(key)
            if value is not None and value < 1:
                raise InvalidPlan("topology.%s must be positive" % key)
        times = [f.get("t") for f in self.faults]
        if any(t is None for t in times):
            raise InvalidPlan("every fault needs a time 't'")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidPlan("fault times must be strictly increasing")
        for fault in self.faults:
            if fault.get("action") not in ("kill-manager", "kill-agent", "restart"):
                raise InvalidPlan("unknown fault action %r" % fault.get("action"))
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        return cls(
            experiment=data.get("experiment", ""),
            name=data.get("name", data.get("experiment", "")),
            seed=data.get("seed"),
            workload=dict(data.get("workload", {})),
            topology=dict(data.get("topology", {})),
            knobs=dict(data.get("knobs", {})),
            faults=list(data.get("faults", [])),
            sweep=dict(data.get("sweep", {})),
        ).validate()

    @classmethod
    def from_file(cls, path: str) -> "ExperimentPlan":
        with open(path, "r", encoding="utf-8") as fp:
            return cls.from_dict(yaml.safe_load(fp) or {})
