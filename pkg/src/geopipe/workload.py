"""Training job description and 3D-parallel placement across datacenters."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .comm import TensorShape, activation_bytes, transfer_time
from .errors import ConfigError, InsufficientGpus
from .topology import ClusterTopology, _num


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    hidden: int
    seq_len: int
    microbatch: int = 1
    num_microbatches: int = 1
    layers_per_partition: int = 1
    params_per_layer: float | None = None  # defaults to 12*H^2
    bytes_per_element: int = 2

    def __post_init__(self):
        for name in ("num_layers", "hidden", "seq_len", "microbatch",
                     "num_microbatches", "layers_per_partition"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.params_per_layer is not None and self.params_per_layer <= 0:
            raise ValueError("params_per_layer must be positive")

    @property
    def partitions(self) -> int:
        return math.ceil(self.num_layers / self.layers_per_partition)

    @property
    def layer_params(self) -> float:
        if self.params_per_layer is not None:
            return self.params_per_layer
        return 12.0 * self.hidden ** 2

    @property
    def shape(self) -> TensorShape:
        return TensorShape(self.microbatch, self.seq_len, self.hidden, self.bytes_per_element)

    @property
    def activation_bytes(self) -> int:
        return activation_bytes(self.shape)

    def partition_layers(self, k: int) -> int:
        """Layers in partition k; the last one may be short."""
        lo = k * self.layers_per_partition
        return min(self.layers_per_partition, self.num_layers - lo)


@dataclass(frozen=True)
class ComputeProfile:
    """Per-stage, per-microbatch compute durations.

    Either give ``fwd_ms`` (``bwd_ms`` and ``recompute_ms`` default to 2x and
    1x of it) or give ``ratio_C`` and let :func:`resolve_compute` derive the
    forward time from the WAN transfer time.
    """

    fwd_ms: float | None = None
    bwd_ms: float | None = None
    recompute_ms: float | None = None
    ratio_C: float | None = None

    def __post_init__(self):
        if (self.fwd_ms is None) == (self.ratio_C is None):
            raise ValueError("give exactly one of fwd_ms and ratio_C")
        if self.ratio_C is not None:
            if self.ratio_C <= 0:
                raise ValueError("ratio_C must be > 0")
            if self.bwd_ms is not None or self.recompute_ms is not None:
                raise ValueError("bwd_ms/recompute_ms are derived when ratio_C is set")
        for name in ("fwd_ms", "bwd_ms", "recompute_ms"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be > 0")


@dataclass(frozen=True)
class Durations:
    fwd_ms: float
    bwd_ms: float
    recompute_ms: float


def reference_comm_ms(model: ModelSpec, topo: ClusterTopology) -> float:
    """Activation transfer time over one saturated node pair on the slowest WAN path.

    Used to turn a communication/compute ratio into compute durations, so it
    depends only on the topology and not on a particular placement.
    """
    ids = [d.id for d in topo.datacenters]
    lat = max((topo.wan.latency_ms(a, b) for i, a in enumerate(ids) for b in ids[i + 1:]),
              default=0.0)
    return transfer_time(model.activation_bytes, topo.wan.pair_bw_cap, lat)


def resolve_compute(profile: ComputeProfile, model: ModelSpec, topo: ClusterTopology) -> Durations:
    if profile.fwd_ms is not None:
        f = profile.fwd_ms
        b = profile.bwd_ms if profile.bwd_ms is not None else 2 * f
        r = profile.recompute_ms if profile.recompute_ms is not None else f
        return Durations(f, b, r)
    f = reference_comm_ms(model, topo) / profile.ratio_C
    return Durations(f, 2 * f, f)


@dataclass(frozen=True)
class Stage:
    dc_id: str
    gpu_ids: tuple[str, ...]
    partitions: tuple[int, int]  # half-open [first, last)
    tp_degree: int = 1

    @property
    def gpu(self) -> str:
        """GPU that represents the stage in timelines (the first TP shard)."""
        return self.gpu_ids[0]


@dataclass(frozen=True)
class DpCell:
    pipelines: tuple[tuple[Stage, ...], ...]

    @property
    def size(self) -> int:
        return len(self.pipelines)

    @property
    def stage_dcs(self) -> tuple[str, ...]:
        return tuple(s.dc_id for s in self.pipelines[0])


@dataclass(frozen=True)
class ParallelismPlan:
    cells: tuple[DpCell, ...]
    C: int
    partition_map: tuple[tuple[str, int], ...] = field(default=())

    @property
    def D(self) -> int:
        return len(self.cells)

    @property
    def num_stages(self) -> int:
        return len(self.cells[0].pipelines[0])

    @property
    def num_pipelines(self) -> int:
        return self.D * self.C

    @property
    def gpus_used(self) -> int:
        return sum(len(s.gpu_ids) for c in self.cells for p in c.pipelines for s in p)

    def check(self) -> None:
        """Raise ValueError if any structural invariant is broken."""
        seen: set[str] = set()
        for ci, cell in enumerate(self.cells):
            if cell.size != self.C:
                raise ValueError(f"cell {ci} has {cell.size} pipelines, expected {self.C}")
            dcs = cell.stage_dcs
            for pipe in cell.pipelines:
                if tuple(s.dc_id for s in pipe) != dcs:
                    raise ValueError(f"cell {ci} mixes stage->DC maps")
                nxt = 0
                for s in pipe:
                    if s.partitions[0] != nxt or s.partitions[1] <= s.partitions[0]:
                        raise ValueError("stages are not contiguous partition ranges")
                    nxt = s.partitions[1]
                    if len(s.gpu_ids) != s.tp_degree:
                        raise ValueError("TP group size differs from tp_degree")
                    for g in s.gpu_ids:
                        if not g.startswith(s.dc_id + ":"):
                            raise ValueError("TP group spans datacenters")
                        if g in seen:
                            raise ValueError(f"GPU {g} used twice")
                        seen.add(g)


def default_dc_order(topo: ClusterTopology) -> list[str]:
    """Decreasing GPU count; ties keep configuration order."""
    order = sorted(range(len(topo.datacenters)), key=lambda i: -topo.datacenters[i].gpu_count)
    return [topo.datacenters[i].id for i in order]


def partition_walk(topo: ClusterTopology, P: int, D: int, C: int,
                   dc_order: list[str] | None = None, tp_degree: int = 1) -> list[tuple[str, int]]:
    """Greedy split of P partitions over DCs; raises InsufficientGpus."""
    if D < 1 or C < 1 or tp_degree < 1:
        raise ValueError("D, C and tp_degree must be >= 1")
    order = dc_order or default_dc_order(topo)
    if sorted(order) != sorted(d.id for d in topo.datacenters):
        raise ValueError("dc_order must be a permutation of the topology's DCs")
    left = P
    out = []
    for dc_id in order:
        if left == 0:
            break
        k = min(left, topo.dc(dc_id).gpu_count // (D * C * tp_degree))
        if k:
            out.append((dc_id, k))
            left -= k
    if left:
        raise InsufficientGpus(left)
    return out


def plan_from_partitions(topo: ClusterTopology, partition_map, D: int, C: int,
                         tp_degree: int = 1) -> ParallelismPlan:
    """Lay out D cells of C pipelines given (dc, partition count) blocks in pipeline order.

    One partition becomes one stage. Inside a DC, GPUs are handed out cell by
    cell, so the GPU of (cell d, rank c, stage k) sits next to the same
    stage of the neighbouring cells.
    """
    next_gpu = {d.id: 0 for d in topo.datacenters}
    layout: dict[tuple[int, int, int], Stage] = {}
    stage = 0
    for dc_id, count in partition_map:
        cap = topo.dc(dc_id).gpu_count
        for k in range(stage, stage + count):
            for d in range(D):
                for c in range(C):
                    first = next_gpu[dc_id]
                    if first + tp_degree > cap:
                        raise InsufficientGpus(1, f"datacenter {dc_id} ran out of GPUs")
                    gpus = tuple(f"{dc_id}:{g}" for g in range(first, first + tp_degree))
                    next_gpu[dc_id] = first + tp_degree
                    layout[d, c, k] = Stage(dc_id, gpus, (k, k + 1), tp_degree)
        stage += count
    cells = tuple(
        DpCell(tuple(tuple(layout[d, c, k] for k in range(stage)) for c in range(C)))
        for d in range(D)
    )
    return ParallelismPlan(cells, C, tuple(partition_map))


def build_plan(topo: ClusterTopology, model: ModelSpec, D: int, C: int,
               dc_order: list[str] | None = None, tp_degree: int = 1) -> ParallelismPlan:
    pm = partition_walk(topo, model.partitions, D, C, dc_order, tp_degree)
    return plan_from_partitions(topo, pm, D, C, tp_degree)


def comm_compute_ratio(plan: ParallelismPlan, model: ModelSpec, topo: ClusterTopology,
                       durations: Durations) -> float:
    """Worst WAN boundary: activation transfer over one node pair / forward time."""
    dcs = plan.cells[0].stage_dcs
    worst = 0.0
    for a, b in zip(dcs, dcs[1:]):
        if a != b:
            t = transfer_time(model.activation_bytes, topo.wan.pair_bw_cap, topo.wan.latency_ms(a, b))
            worst = max(worst, t / durations.fwd_ms)
    return worst


# --- configuration sections ----------------------------------------------------

@dataclass(frozen=True)
class Workload:
    model: ModelSpec
    compute: ComputeProfile
    D: int | None = None
    C: int = 1
    tp_degree: int = 1
    dc_order: tuple[str, ...] | None = None


def workload_from_dict(doc: dict, topo: ClusterTopology | None = None) -> Workload:
    m = doc.get("model")
    if not isinstance(m, dict):
        raise ConfigError("model", "missing section")
    ints = {}
    for key, default in (("num_layers", None), ("hidden", None), ("seq_len", None),
                         ("microbatch", 1), ("num_microbatches", 1),
                         ("layers_per_partition", 1), ("bytes_per_element", 2)):
        ints[key] = _num(m, key, "model", required=default is None, default=default,
                         minimum=1, integer=True)
    if ints["bytes_per_element"] not in (1, 2, 4):
        raise ConfigError("model.bytes_per_element", "must be 1, 2 or 4")
    ppl = _num(m, "params_per_layer", "model", required=False, minimum=0, strict=True)
    model = ModelSpec(params_per_layer=ppl, **ints)

    c = doc.get("compute")
    if not isinstance(c, dict):
        raise ConfigError("compute", "missing section")
    if ("fwd_ms" in c) == ("ratio_C" in c):
        raise ConfigError("compute", "give exactly one of fwd_ms and ratio_C")
    if "ratio_C" in c:
        if "bwd_ms" in c or "recompute_ms" in c:
            raise ConfigError("compute", "bwd_ms/recompute_ms cannot be combined with ratio_C")
        compute = ComputeProfile(ratio_C=_num(c, "ratio_C", "compute", minimum=0, strict=True))
    else:
        compute = ComputeProfile(
            fwd_ms=_num(c, "fwd_ms", "compute", minimum=0, strict=True),
            bwd_ms=_num(c, "bwd_ms", "compute", required=False, minimum=0, strict=True),
            recompute_ms=_num(c, "recompute_ms", "compute", required=False, minimum=0, strict=True),
        )

    p = doc.get("parallelism", {})
    if not isinstance(p, dict):
        raise ConfigError("parallelism", "expected an object")
    D = _num(p, "D", "parallelism", required=False, default=None, minimum=1, integer=True)
    C = _num(p, "C", "parallelism", required=False, default=1, minimum=1, integer=True)
    tp = _num(p, "tp_degree", "parallelism", required=False, default=1, minimum=1, integer=True)
    order = p.get("dc_order")
    if order is not None:
        if not isinstance(order, list) or not all(isinstance(x, str) for x in order):
            raise ConfigError("parallelism.dc_order", "expected a list of datacenter ids")
        if topo is not None and sorted(order) != sorted(d.id for d in topo.datacenters):
            raise ConfigError("parallelism.dc_order", "must be a permutation of the datacenter ids")
        order = tuple(order)
    return Workload(model, compute, D, C, tp, order)


def workload_to_dict(w: Workload) -> dict:
    m = w.model
    model = {"num_layers": m.num_layers, "hidden": m.hidden, "seq_len": m.seq_len,
             "microbatch": m.microbatch, "num_microbatches": m.num_microbatches,
             "layers_per_partition": m.layers_per_partition,
             "bytes_per_element": m.bytes_per_element}
    if m.params_per_layer is not None:
        model["params_per_layer"] = m.params_per_layer
    c = w.compute
    compute = {"ratio_C": c.ratio_C} if c.ratio_C is not None else {
        k: v for k, v in (("fwd_ms", c.fwd_ms), ("bwd_ms", c.bwd_ms),
                          ("recompute_ms", c.recompute_ms)) if v is not None}
    par = {"C": w.C, "tp_degree": w.tp_degree}
    if w.D is not None:
        par["D"] = w.D
    if w.dc_order is not None:
        par["dc_order"] = list(w.dc_order)
    return {"model": model, "compute": compute, "parallelism": par}
