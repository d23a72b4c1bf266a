"""Datacenters, the WAN between them, and their JSON configuration."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from .comm import DEFAULT_PAIR_CAP_GBPS, DEFAULT_TCP_TABLE, GBPS
from .errors import ConfigError


@dataclass(frozen=True)
class Datacenter:
    id: str
    gpu_count: int
    intra_bw: float  # bytes/ms
    intra_latency_ms: float = 0.0

    def __post_init__(self):
        if self.gpu_count < 1:
            raise ValueError("gpu_count must be >= 1")
        if self.intra_bw <= 0:
            raise ValueError("intra_bw must be > 0")
        if self.intra_latency_ms < 0:
            raise ValueError("intra_latency_ms must be >= 0")


def pair_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class WanProfile:
    """One-way latencies between DCs plus the per-node-pair bandwidth model.

    ``latency`` maps an unordered pair (stored sorted) to milliseconds.
    ``aggregate_cap`` optionally bounds the bandwidth one DP-cell may pool on
    a DC pair; ``None`` means unlimited beyond the per-pair cap.
    """

    latency: dict[tuple[str, str], float] = field(default_factory=dict)
    pair_bw_cap: float = DEFAULT_PAIR_CAP_GBPS * GBPS
    tcp_table: tuple[tuple[float, float], ...] = DEFAULT_TCP_TABLE
    aggregate_cap: float | None = None

    def latency_ms(self, a: str, b: str) -> float:
        if a == b:
            return 0.0
        return self.latency[pair_key(a, b)]


@dataclass(frozen=True)
class ClusterTopology:
    datacenters: tuple[Datacenter, ...]
    wan: WanProfile = field(default_factory=WanProfile)

    def __post_init__(self):
        ids = [d.id for d in self.datacenters]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate datacenter id")
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                if pair_key(a, b) not in self.wan.latency:
                    raise ValueError(f"missing WAN latency for {a}|{b}")

    def dc(self, dc_id: str) -> Datacenter:
        for d in self.datacenters:
            if d.id == dc_id:
                return d
        raise KeyError(dc_id)

    @property
    def total_gpus(self) -> int:
        return sum(d.gpu_count for d in self.datacenters)


def uniform_topology(gpu_counts, latency_ms: float = 0.0, intra_bw_gbps: float = 100.0,
                     pair_cap_gbps: float = DEFAULT_PAIR_CAP_GBPS, prefix: str = "dc") -> ClusterTopology:
    """Convenience builder: DCs named dc1..dcN with one latency for every pair."""
    dcs = tuple(Datacenter(f"{prefix}{i + 1}", int(g), intra_bw_gbps * GBPS)
                for i, g in enumerate(gpu_counts))
    lat = {pair_key(a.id, b.id): float(latency_ms)
           for i, a in enumerate(dcs) for b in dcs[i + 1:]}
    return ClusterTopology(dcs, WanProfile(lat, pair_cap_gbps * GBPS))


# --- configuration documents -------------------------------------------------

def _num(obj: dict, key: str, path: str, *, required=True, default=None, minimum=None,
         strict=False, integer=False):
    if key not in obj:
        if required:
            raise ConfigError(f"{path}.{key}" if path else key, "missing field")
        return default
    v = obj[key]
    where = f"{path}.{key}" if path else key
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(where, f"expected a number, got {type(v).__name__}")
    if integer and (not isinstance(v, int)):
        raise ConfigError(where, "expected an integer")
    if minimum is not None and (v <= minimum if strict else v < minimum):
        op = ">" if strict else ">="
        raise ConfigError(where, f"must be {op} {minimum}")
    return v


def topology_from_dict(doc: Any) -> ClusterTopology:
    if not isinstance(doc, dict):
        raise ConfigError("", "top level must be an object")
    dcs_raw = doc.get("datacenters")
    if not isinstance(dcs_raw, list) or not dcs_raw:
        raise ConfigError("datacenters", "expected a non-empty list")
    dcs = []
    seen = set()
    for i, d in enumerate(dcs_raw):
        path = f"datacenters[{i}]"
        if not isinstance(d, dict):
            raise ConfigError(path, "expected an object")
        dc_id = d.get("id")
        if not isinstance(dc_id, str) or not dc_id or "|" in dc_id:
            raise ConfigError(f"{path}.id", "expected a non-empty string without '|'")
        if dc_id in seen:
            raise ConfigError(f"{path}.id", f"duplicate id {dc_id!r}")
        seen.add(dc_id)
        gpus = _num(d, "gpu_count", path, minimum=1, integer=True)
        bw = _num(d, "intra_bw_gbps", path, minimum=0, strict=True)
        lat = _num(d, "intra_latency_ms", path, required=False, default=0.0, minimum=0)
        dcs.append(Datacenter(dc_id, gpus, bw * GBPS, float(lat)))

    wan_raw = doc.get("wan", {})
    if not isinstance(wan_raw, dict):
        raise ConfigError("wan", "expected an object")
    lat_raw = wan_raw.get("latency_ms", {})
    if not isinstance(lat_raw, dict):
        raise ConfigError("wan.latency_ms", "expected an object keyed by 'a|b'")
    latency: dict[tuple[str, str], float] = {}
    for key, v in lat_raw.items():
        path = f"wan.latency_ms.{key}"
        parts = key.split("|")
        if len(parts) != 2:
            raise ConfigError(path, "key must look like 'a|b'")
        a, b = parts
        for x in (a, b):
            if x not in seen:
                raise ConfigError(path, f"unknown datacenter {x!r}")
        if isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0:
            raise ConfigError(path, "latency must be a non-negative number")
        if a == b:
            if v != 0:
                raise ConfigError(path, "self latency must be 0")
            continue
        k = pair_key(a, b)
        if k in latency and latency[k] != v:
            raise ConfigError(path, f"asymmetric latency ({latency[k]} vs {v})")
        latency[k] = float(v)
    ids = [d.id for d in dcs]
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            if pair_key(a, b) not in latency:
                raise ConfigError("wan.latency_ms", f"missing pair {a}|{b}")

    cap = _num(wan_raw, "pair_bw_cap_gbps", "wan", required=False,
               default=DEFAULT_PAIR_CAP_GBPS, minimum=0, strict=True)
    agg = _num(wan_raw, "aggregate_cap_gbps", "wan", required=False, default=None,
               minimum=0, strict=True)
    table = DEFAULT_TCP_TABLE
    if "tcp_table" in wan_raw:
        table = _parse_table(wan_raw["tcp_table"])
    wan = WanProfile(latency, cap * GBPS, table, None if agg is None else agg * GBPS)
    return ClusterTopology(tuple(dcs), wan)


def _parse_table(raw) -> tuple[tuple[float, float], ...]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError("wan.tcp_table", "expected a non-empty list of [ms, mbps]")
    rows = []
    for i, row in enumerate(raw):
        path = f"wan.tcp_table[{i}]"
        if (not isinstance(row, list) or len(row) != 2
                or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in row)):
            raise ConfigError(path, "expected [latency_ms, mbps]")
        if row[0] < 0 or row[1] <= 0:
            raise ConfigError(path, "latency must be >= 0 and bandwidth > 0")
        if rows and (row[0] <= rows[-1][0] or row[1] >= rows[-1][1]):
            raise ConfigError(path, "latencies must increase and bandwidths decrease")
        rows.append((float(row[0]), float(row[1])))
    return tuple(rows)


def topology_to_dict(topo: ClusterTopology) -> dict:
    """Canonical document: pairs keyed in datacenter order, rates in Gbps."""
    ids = [d.id for d in topo.datacenters]
    lat = {}
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            lat[f"{a}|{b}"] = topo.wan.latency_ms(a, b)
    wan = {
        "latency_ms": lat,
        "pair_bw_cap_gbps": topo.wan.pair_bw_cap / GBPS,
        "tcp_table": [list(p) for p in topo.wan.tcp_table],
    }
    if topo.wan.aggregate_cap is not None:
        wan["aggregate_cap_gbps"] = topo.wan.aggregate_cap / GBPS
    return {
        "datacenters": [
            {"id": d.id, "gpu_count": d.gpu_count, "intra_bw_gbps": d.intra_bw / GBPS,
             "intra_latency_ms": d.intra_latency_ms}
            for d in topo.datacenters
        ],
        "wan": wan,
    }


def load_topology(config_text: str) -> ClusterTopology:
    try:
        doc = json.loads(config_text)
    except json.JSONDecodeError as e:
        raise ConfigError("", f"invalid JSON: {e}") from None
    return topology_from_dict(doc)


def dump_topology(topo: ClusterTopology) -> str:
    return json.dumps(topology_to_dict(topo), indent=2, sort_keys=True)
