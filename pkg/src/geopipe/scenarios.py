"""Ready-made configurations used by the tests, the CLI and the README.

Each builder returns plain library objects; nothing here is special-cased
elsewhere in the package.
"""
from __future__ import annotations

from dataclasses import dataclass

from .comm import GBPS
from .topology import ClusterTopology, Datacenter, WanProfile, pair_key, uniform_topology
from .workload import ComputeProfile, ModelSpec, ParallelismPlan, build_plan

# GPT-A and GPT-B shapes (L, H); 4K/6K/8K are binary kilo.
GPT_A = dict(seq_len=4096, hidden=4096)
GPT_B = dict(seq_len=6144, hidden=8192)


@dataclass(frozen=True)
class Fixture:
    topo: ClusterTopology
    model: ModelSpec
    compute: ComputeProfile
    plan: ParallelismPlan


def slot_fixture(M: int = 4, C: int = 2, comm_slots: float = 2.0) -> Fixture:
    """Two pipelines of six stages over 3 DCs x 4 GPUs, in unit time slots.

    A slot is 1 ms. Forward and recompute take one slot, backward two, and
    an activation or gradient needs ``comm_slots`` slots over one node pair
    (so a cell of C pipelines moves it in comm_slots / C). The intra-DC
    fabric is idealised to zero transfer time.
    """
    hidden = 1000
    act = 2 * hidden  # bytes, B=L=1, fp16
    pair_bw = act / comm_slots  # bytes/ms
    dcs = tuple(Datacenter(f"dc{i + 1}", 2 * C, 1e15) for i in range(3))
    lat = {pair_key(a.id, b.id): 0.0 for i, a in enumerate(dcs) for b in dcs[i + 1:]}
    topo = ClusterTopology(dcs, WanProfile(lat, pair_bw))
    model = ModelSpec(num_layers=6, hidden=hidden, seq_len=1, microbatch=1, num_microbatches=M,
                      layers_per_partition=1)
    compute = ComputeProfile(fwd_ms=1.0, bwd_ms=2.0, recompute_ms=1.0)
    return Fixture(topo, model, compute, build_plan(topo, model, D=1, C=C))


def twelve_gpu_fixture(latency_ms: float = 40.0, M: int = 4, ratio_C: float = 2.0,
                    shape=GPT_A) -> Fixture:
    """Twelve GPUs in 3 DCs (4 each), one cell of two 6-stage pipelines.

    Intra-DC links are 100 Gbps, node pairs across DCs are capped at 5 Gbps.
    Compute is derived from ``ratio_C`` against a saturated node pair.
    """
    topo = uniform_topology([4, 4, 4], latency_ms=latency_ms, intra_bw_gbps=100.0)
    model = ModelSpec(num_layers=6, microbatch=1, num_microbatches=M, layers_per_partition=1, **shape)
    compute = ComputeProfile(ratio_C=ratio_C)
    return Fixture(topo, model, compute, build_plan(topo, model, D=1, C=2))


def dc_set_1(n_dcs: int) -> ClusterTopology:
    return uniform_topology([600] * n_dcs, latency_ms=0.0, intra_bw_gbps=100.0)


def dc_set_2() -> ClusterTopology:
    return uniform_topology([600, 500, 400, 300, 200], latency_ms=0.0, intra_bw_gbps=100.0)


def f_sweep_topology(second: int) -> ClusterTopology:
    return uniform_topology([600] + ([second] if second > 0 else []), latency_ms=0.0,
                            intra_bw_gbps=100.0)


def sim_model(M: int = 60) -> ModelSpec:
    """Sixty one-layer partitions of a GPT-A sized model, 60 microbatches."""
    return ModelSpec(num_layers=60, microbatch=1, num_microbatches=M, layers_per_partition=1, **GPT_A)


@dataclass(frozen=True)
class DpWanResult:
    allreduce_ms: float
    compute_ms: float
    baseline_allreduce_ms: float

    @property
    def iteration_ms(self) -> float:
        return self.allreduce_ms + self.compute_ms

    @property
    def baseline_ms(self) -> float:
        return self.baseline_allreduce_ms + self.compute_ms

    @property
    def slowdown(self) -> float:
        return self.iteration_ms / self.baseline_ms

    @property
    def allreduce_share(self) -> float:
        return self.allreduce_ms / self.iteration_ms


def dp_over_wan(nodes: int = 6, latency_ms: float = 40.0, num_layers: int = 6, shape=GPT_B,
                baseline_gbps: float = 10.0, compute_share: float = 0.02) -> DpWanResult:
    """Plain data parallelism with every node in its own DC.

    One ring spans all nodes and, as with stock PyTorch, each node pair has a
    single TCP connection, so the ring runs at the latency-limited rate. The
    baseline is the same ring inside one DC at ``baseline_gbps``. Compute is
    not modelled from first principles; it is the residual share left over
    by the measured all-reduce fraction at ``latency_ms``.
    """
    from .comm import allreduce_time, single_tcp_bandwidth

    model = ModelSpec(num_layers=num_layers, **shape)
    params = model.layer_params * num_layers
    wan = allreduce_time(params, nodes, single_tcp_bandwidth(latency_ms))
    base = allreduce_time(params, nodes, baseline_gbps * GBPS)
    compute = wan * compute_share / (1.0 - compute_share)
    return DpWanResult(wan, compute, base)


DC_SETS = [(f"set1-{k}dc", [600] * k) for k in range(1, 6)] + [("set2", [600, 500, 400, 300, 200])]


@dataclass(frozen=True)
class ScalingRow:
    name: str
    atlas: object  # SelectionRow
    varuna: object

    @property
    def gain(self) -> float:
        """Relative throughput gain of ATLAS over Varuna."""
        return self.atlas.throughput / self.varuna.throughput - 1.0


def scaling_study(C: int, latency_ms: float = 0.0, model: ModelSpec | None = None) -> list[ScalingRow]:
    """The DC selector on each DC set, ATLAS cells of C vs Varuna's independent pipelines.

    Both sides share the compute profile (``ratio_C = C``); Varuna runs one
    pipeline per cell.
    """
    from .dc_select import SelectionInput, select

    model = model or sim_model()
    comp = ComputeProfile(ratio_C=float(C))
    out = []
    for name, counts in DC_SETS:
        topo = uniform_topology(counts, latency_ms=latency_ms, intra_bw_gbps=100.0)
        a = select(SelectionInput(topo, model, comp, C, policy="atlas", label=name)).chosen
        v = select(SelectionInput(topo, model, comp, 1, policy="varuna", label=name)).chosen
        out.append(ScalingRow(name, a, v))
    return out


@dataclass(frozen=True)
class FSweepRow:
    second: int
    chosen: object  # SelectionRow
    cross_dc: object | None  # same D with the small DC placed first, if feasible

    @property
    def F(self) -> float:
        return self.second / 600

    @property
    def inflation(self) -> float | None:
        if self.cross_dc is None or not self.cross_dc.feasible:
            return None
        return self.cross_dc.total_time_ms / self.chosen.total_time_ms - 1.0


def f_sweep(C: int = 2, step: int = 60, model: ModelSpec | None = None) -> list[FSweepRow]:
    """Grow a second DC next to a fixed 600-GPU one and rerun the selector.

    For every second DC the report also keeps a cross-DC row: the chosen D
    with the walk forced to start in the small DC, so the pipeline spans both.
    """
    from .dc_select import SelectionInput, select

    model = model or sim_model()
    comp = ComputeProfile(ratio_C=float(C))
    out = []
    for second in range(0, 601, step):
        topo = f_sweep_topology(second)
        rep = select(SelectionInput(topo, model, comp, C))
        cross = None
        if second:
            rev = select(SelectionInput(topo, model, comp, C, D_max=rep.chosen_D,
                                        dc_order=("dc2", "dc1")))
            cross = next(r for r in rev.rows if r.D == rep.chosen_D)
        out.append(FSweepRow(second, rep.chosen, cross))
    return out
