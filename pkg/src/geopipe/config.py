"""Run configuration documents (JSON).

A document holds ``topology`` and ``workload`` sections; ``whatif`` reads an
optional ``scenarios`` list of ``{label, topology, workload, policy}``
entries, and ``bubbletea`` an optional section of the same name.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .scheduler import POLICIES, canonical_policy
from .topology import ClusterTopology, topology_from_dict
from .workload import Workload, workload_from_dict


@dataclass(frozen=True)
class Scenario:
    label: str
    topo: ClusterTopology
    workload: Workload
    policy: str = "atlas"


@dataclass
class RunConfig:
    topo: ClusterTopology
    workload: Workload
    path: str = ""
    scenarios: list[Scenario] = field(default_factory=list)
    bubbletea: dict = field(default_factory=dict)


def _prefixed(prefix: str, fn, *args):
    try:
        return fn(*args)
    except ConfigError as e:
        raise ConfigError(f"{prefix}.{e.path}" if e.path else prefix, e.message) from None


def policy_name(name: str, path: str = "policy") -> str:
    try:
        if not isinstance(name, str):
            raise ValueError(name)
        return canonical_policy(name)
    except ValueError:
        raise ConfigError(path, f"unknown policy {name!r}; expected one of {sorted(POLICIES)}") from None


def config_from_dict(doc, path: str = "") -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("", "top level must be an object")
    if "topology" not in doc:
        raise ConfigError("topology", "missing section")
    if not isinstance(doc.get("workload"), dict):
        raise ConfigError("workload", "missing section")
    topo = _prefixed("topology", topology_from_dict, doc["topology"])
    wl = _prefixed("workload", workload_from_dict, doc["workload"], topo)
    scenarios = []
    raw = doc.get("scenarios", [])
    if not isinstance(raw, list):
        raise ConfigError("scenarios", "expected a list")
    for i, s in enumerate(raw):
        p = f"scenarios[{i}]"
        if not isinstance(s, dict):
            raise ConfigError(p, "expected an object")
        t = _prefixed(f"{p}.topology", topology_from_dict, s["topology"]) if "topology" in s else topo
        w = _prefixed(f"{p}.workload", workload_from_dict, s["workload"], t) if "workload" in s else wl
        pol = policy_name(s.get("policy", "atlas"), f"{p}.policy")
        scenarios.append(Scenario(str(s.get("label", f"scenario{i}")), t, w, pol))
    bt = doc.get("bubbletea", {})
    if not isinstance(bt, dict):
        raise ConfigError("bubbletea", "expected an object")
    return RunConfig(topo, wl, path, scenarios, bt)


def load_config(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError("", f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("", f"invalid JSON: {e}") from None
    return config_from_dict(doc, path)
