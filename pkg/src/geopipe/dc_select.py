"""Choose how many DP-cells to run and where their stages live.

For each cell count D the greedy walk assigns partitions to DCs, one cell is
scheduled to get the pipeline time, the stage all-reduce over D*C replicas
is added, and throughput is D*C / total. The smallest D with the best
throughput wins.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import InsufficientGpus
from .scheduler import ScheduleOptions, canonical_policy, cell_makespan_ns, cell_problem
from .scheduler import stage_allreduce_ms
from .timeline import ns_to_ms
from .topology import ClusterTopology
from .workload import (ComputeProfile, Durations, ModelSpec, partition_walk,
                       plan_from_partitions, resolve_compute)


@dataclass(frozen=True)
class SelectionInput:
    topo: ClusterTopology
    model: ModelSpec
    compute: ComputeProfile
    C: int
    D_max: int | None = None
    dc_order: tuple[str, ...] | None = None
    policy: str = "atlas"
    options: ScheduleOptions = ScheduleOptions()
    tp_degree: int = 1
    label: str = ""

    @property
    def P(self) -> int:
        return self.model.partitions

    def d_max(self) -> int:
        if self.D_max is not None:
            return self.D_max
        return max(1, self.topo.total_gpus // (self.C * self.P * self.tp_degree))


@dataclass(frozen=True)
class SelectionRow:
    D: int
    partitions: tuple[tuple[str, int], ...]
    pp_time_ms: float
    allreduce_time_ms: float
    total_time_ms: float
    throughput: float  # pipelines finishing per second, D*C / total
    gpus_used: int

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.total_time_ms)


@dataclass
class SelectionReport:
    rows: list[SelectionRow]
    chosen_D: int | None
    label: str = ""
    policy: str = "atlas"
    C: int = 1

    @property
    def chosen(self) -> SelectionRow | None:
        for r in self.rows:
            if r.D == self.chosen_D:
                return r
        return None

    @property
    def gpus_used(self) -> int:
        return self.chosen.gpus_used if self.chosen else 0


@dataclass
class PipelineTimer:
    """get_latency_pp with a cache keyed by the partition map.

    One cell's schedule does not depend on how many cells run beside it, so
    every D that yields the same map reuses the same makespan.
    """

    topo: ClusterTopology
    model: ModelSpec
    durations: Durations
    C: int
    policy: str = "atlas"
    options: ScheduleOptions = ScheduleOptions()
    tp_degree: int = 1
    _cache: dict = field(default_factory=dict)

    def __call__(self, partitions) -> float:
        key = tuple(partitions)
        if key not in self._cache:
            plan = plan_from_partitions(self.topo, key, 1, self.C, self.tp_degree)
            prob = cell_problem(plan, self.model, self.topo, self.durations, self.policy, self.options)
            self._cache[key] = ns_to_ms(cell_makespan_ns(prob, self.policy, self.options))
        return self._cache[key]


def get_latency_dp(topo: ClusterTopology, model: ModelSpec, partitions, N: int,
                   C: int = 1, tp_degree: int = 1) -> float:
    """Slowest stage all-reduce over N replicas on its DC's fabric."""
    plan = plan_from_partitions(topo, tuple(partitions), 1, C, tp_degree)
    # ring size is N regardless of how many cells the plan object holds
    from .comm import allreduce_time

    out = 0.0
    for st in plan.cells[0].pipelines[0]:
        params = sum(model.partition_layers(k) for k in range(*st.partitions)) * model.layer_params
        out = max(out, allreduce_time(params / st.tp_degree, N, topo.dc(st.dc_id).intra_bw))
    return out


def select(inp: SelectionInput, timer: PipelineTimer | None = None) -> SelectionReport:
    policy = canonical_policy(inp.policy)
    durations = resolve_compute(inp.compute, inp.model, inp.topo)
    timer = timer or PipelineTimer(inp.topo, inp.model, durations, inp.C, policy, inp.options,
                                   inp.tp_degree)
    order = list(inp.dc_order) if inp.dc_order else None
    rows = []
    for D in range(1, inp.d_max() + 1):
        try:
            pm = tuple(partition_walk(inp.topo, inp.P, D, inp.C, order, inp.tp_degree))
        except InsufficientGpus:
            rows.append(SelectionRow(D, (), math.inf, math.inf, math.inf, 0.0, 0))
            continue
        pp = timer(pm)
        ar = get_latency_dp(inp.topo, inp.model, pm, D * inp.C, inp.C, inp.tp_degree)
        total = pp + ar
        used = sum(k for _, k in pm) * D * inp.C * inp.tp_degree
        rows.append(SelectionRow(D, pm, pp, ar, total, D * inp.C / (total / 1000.0), used))
    best = max((r.throughput for r in rows), default=0.0)
    chosen = next((r.D for r in rows if r.feasible and r.throughput == best), None)
    return SelectionReport(rows, chosen, inp.label, policy, inp.C)


@dataclass(frozen=True)
class WhatIfRow:
    scenario: str
    D: int
    partitions: str
    pp_time_ms: float
    allreduce_time_ms: float
    total_time_ms: float
    throughput: float
    chosen: bool


def whatif(scenarios: list[SelectionInput]) -> list[WhatIfRow]:
    table = []
    for i, inp in enumerate(scenarios):
        rep = select(inp)
        name = inp.label or f"scenario{i}"
        for r in rep.rows:
            table.append(WhatIfRow(name, r.D, " ".join(f"{dc}={k}" for dc, k in r.partitions),
                                   r.pp_time_ms, r.allreduce_time_ms, r.total_time_ms,
                                   r.throughput, r.D == rep.chosen_D))
    return table
