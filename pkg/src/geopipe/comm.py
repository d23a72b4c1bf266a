"""Closed-form communication costs.

All times are in milliseconds, sizes in bytes and bandwidths in bytes per
millisecond. ``GBPS`` and ``MBPS`` convert link rates into that unit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .topology import WanProfile

GBPS = 125_000.0  # bytes/ms in one gigabit per second
MBPS = 125.0

# Measured single-connection throughput, (one-way latency ms, Mbps).
DEFAULT_TCP_TABLE: tuple[tuple[float, float], ...] = (
    (10.0, 1220.0),
    (20.0, 600.0),
    (30.0, 396.0),
    (40.0, 293.0),
)
DEFAULT_PAIR_CAP_GBPS = 5.0


@dataclass(frozen=True)
class TensorShape:
    """Shape of one microbatch activation crossing a stage boundary."""

    batch: int
    seq_len: int
    hidden: int
    bytes_per_element: int = 2

    def __post_init__(self):
        for name in ("batch", "seq_len", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.bytes_per_element not in (1, 2, 4):
            raise ValueError("bytes_per_element must be 1, 2 or 4")


@dataclass(frozen=True)
class BandwidthQuery:
    latency_ms: float
    n_connections: int = 1

    def __post_init__(self):
        if self.n_connections < 1:
            raise ValueError("n_connections must be >= 1")
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be >= 0")


def _table_of(profile: WanProfile | None) -> tuple[tuple[float, float], ...]:
    return profile.tcp_table if profile is not None else DEFAULT_TCP_TABLE


def single_tcp_bandwidth(latency_ms: float, profile: WanProfile | None = None) -> float:
    """Bandwidth of one TCP connection at a given one-way latency.

    Table points are returned exactly. Between points we interpolate
    linearly in log(latency); below the first point the first value is used
    and past the last point throughput falls off as 1/latency.
    """
    table = _table_of(profile)
    lats = [p[0] for p in table]
    if latency_ms <= lats[0]:
        return table[0][1] * MBPS
    if latency_ms >= lats[-1]:
        last_lat, last_bw = table[-1]
        if latency_ms == last_lat:
            return last_bw * MBPS
        return last_bw * MBPS * last_lat / latency_ms
    for (l0, b0), (l1, b1) in zip(table, table[1:]):
        if latency_ms == l0:
            return b0 * MBPS
        if l0 < latency_ms < l1:
            w = (math.log(latency_ms) - math.log(l0)) / (math.log(l1) - math.log(l0))
            return (b0 + w * (b1 - b0)) * MBPS
    return table[-1][1] * MBPS  # unreachable for a valid table


def connections_to_saturate(latency_ms: float, profile: WanProfile | None = None) -> int:
    """Smallest connection count whose aggregate reaches the pair cap."""
    cap = profile.pair_bw_cap if profile is not None else DEFAULT_PAIR_CAP_GBPS * GBPS
    return max(1, math.ceil(cap / single_tcp_bandwidth(latency_ms, profile)))


def effective_pair_bandwidth(q: BandwidthQuery, profile: WanProfile | None = None) -> float:
    cap = profile.pair_bw_cap if profile is not None else DEFAULT_PAIR_CAP_GBPS * GBPS
    return min(q.n_connections * single_tcp_bandwidth(q.latency_ms, profile), cap)


def transfer_time(nbytes: float, bw: float, latency_ms: float = 0.0) -> float:
    if bw <= 0:
        raise ValueError("bandwidth must be positive")
    if nbytes < 0:
        raise ValueError("negative transfer size")
    return latency_ms + nbytes / bw


def allreduce_time(params: float, ring_size: int, bw: float) -> float:
    """Ring all-reduce of fp16 gradients: 4*P*(N-1)/(N*bw)."""
    if ring_size < 1:
        raise ValueError("ring_size must be >= 1")
    if bw <= 0:
        raise ValueError("bandwidth must be positive")
    if ring_size == 1:
        return 0.0
    return 4.0 * params * (ring_size - 1) / (ring_size * bw)


def activation_bytes(shape: TensorShape) -> int:
    return shape.batch * shape.seq_len * shape.hidden * shape.bytes_per_element
