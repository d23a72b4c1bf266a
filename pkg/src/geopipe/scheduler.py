"""Pipeline schedules for one training iteration under four policies.

Every policy is the same list scheduler with different knobs. Each GPU
repeatedly offers at most two candidates (its next forward and the head of
its gradient queue, as a recompute or a backward) and the globally earliest
candidate is committed. Knobs:

* ``prio``: order of kinds on equal start time (earlier letter wins).
* ``jit``: start a recompute so that it ends as the gradient lands.
* ``caps``: per-stage limit on activations held (forward done, backward not).
* ``barrier``: release backwards only after every forward (GPipe).
* ``pooled``: WAN boundaries use one link per cell at C times the pair
  bandwidth, reserved in time; a compute task that feeds the WAN is only
  placed where its message can leave the moment it ends.

Durations are integer nanoseconds so ties resolve identically on every run.
"""
from __future__ import annotations

import heapq
from bisect import bisect_left, insort
from dataclasses import dataclass, replace

from .comm import effective_pair_bandwidth, BandwidthQuery, connections_to_saturate, single_tcp_bandwidth
from .errors import Deadlock
from .timeline import (Direction, Schedule, ScheduledTask, ScheduledTransfer, TaskKind,
                       ms_to_ns)
from .topology import ClusterTopology
from .workload import Durations, ModelSpec, ParallelismPlan

POLICIES = ("gpipe", "onef1b", "varuna", "atlas")
_ALIASES = {"1f1b": "onef1b"}


def canonical_policy(name: str) -> str:
    name = _ALIASES.get(name.lower(), name.lower())
    if name not in POLICIES:
        raise ValueError(f"unknown policy {name!r}; pick one of {', '.join(POLICIES)} or 1f1b")
    return name


@dataclass(frozen=True)
class ScheduleOptions:
    recompute: bool = True
    multi_conn: bool = True
    mem_limit: int | None = None  # ATLAS default: number of stages
    turn: int = 4  # microbatches a rank sends per WAN turn (ATLAS tie-break)


@dataclass(frozen=True)
class CellProblem:
    """Everything the list scheduler needs about one DP-cell, in nanoseconds.

    Boundary ``k`` joins stage k and k+1. ``occ[k]`` is how long a message
    keeps the sending link busy; ``lat[k]`` is added on top before it lands.
    """

    n: int
    S: int
    M: int
    fwd: tuple[int, ...]
    bwd: tuple[int, ...]
    rec: tuple[int, ...]  # 0 where the stage does not recompute
    occ: tuple[int, ...]
    lat: tuple[int, ...]
    wan: tuple[bool, ...]
    nbytes: int = 0
    pooled: bool = False

    def __post_init__(self):
        if min(self.fwd + self.bwd, default=1) <= 0:
            raise ValueError("compute durations must be positive")
        if len(self.occ) != self.S - 1 or len(self.lat) != self.S - 1 or len(self.wan) != self.S - 1:
            raise ValueError("boundary arrays must have S-1 entries")


@dataclass(frozen=True)
class _Knobs:
    prio: str
    jit: bool
    caps: tuple[int, ...]
    barrier: bool = False
    turn: int = 1


def earliest_gap(iv: list[tuple[int, int]], t: int, c: int, x: int) -> int:
    """Earliest t' >= t such that [t'+c, t'+c+x) misses every interval in ``iv``.

    ``iv`` is sorted and non-overlapping.
    """
    if x <= 0:
        return t
    i = max(bisect_left(iv, (t + c,)) - 1, 0)
    while i < len(iv):
        s, e = iv[i]
        a = t + c
        if e <= a:
            i += 1
            continue
        if s >= a + x:
            return t
        t = e - c
        i += 1
    return t


class _Gpu:
    __slots__ = ("free", "nf", "infl", "lock", "fend", "rend", "act", "grad", "bq", "bdone")

    def __init__(self):
        self.free = 0
        self.nf = 0  # next forward microbatch
        self.infl = 0
        self.lock = None  # microbatch whose backward must follow its recompute
        self.fend: dict[int, int] = {}
        self.rend: dict[int, int] = {}
        self.act: dict[int, int] = {}  # activation arrival
        self.grad: dict[int, int] = {}  # gradient arrival
        self.bq: list[tuple[int, int]] = []  # (gradient arrival, microbatch)
        self.bdone: set[int] = set()

    def head(self):
        while self.bq and self.bq[0][1] in self.bdone:
            heapq.heappop(self.bq)
        return self.bq[0] if self.bq else None


# raw records: tasks (p, s, kind, m, start, end); transfers (p, k, dir, m, start, busy, lat)
RawTask = tuple[int, int, TaskKind, int, int, int]
RawTransfer = tuple[int, int, Direction, int, int, int, int]


def list_schedule(prob: CellProblem, knobs: _Knobs) -> tuple[list[RawTask], list[RawTransfer]]:
    n, S, M = prob.n, prob.S, prob.M
    rank = {k: knobs.prio.index(k) for k in "BRF"}
    pooled = prob.pooled
    res: dict[tuple[int, Direction], list[tuple[int, int]]] = {}
    fifo: dict[tuple[int, int, Direction], int] = {}
    st = {(p, s): _Gpu() for p in range(n) for s in range(S)}
    for p in range(n):
        for m in range(M):
            st[p, 0].act[m] = 0
    last_fwd = [0] * n
    tasks: list[RawTask] = []
    transfers: list[RawTransfer] = []
    turn = max(1, knobs.turn)

    def reserved(k: int) -> bool:
        return pooled and prob.wan[k]

    def dur(kind: str, s: int) -> int:
        return prob.fwd[s] if kind == "F" else prob.rec[s] if kind == "R" else prob.bwd[s]

    def candidate(p: int, s: int):
        g = st[p, s]
        cands = []
        if g.lock is not None:
            m = g.lock
            cands.append(("B", m, max(g.free, g.grad[m], g.rend[m])))
        else:
            h = g.head()
            if h is not None:
                ga, m = h
                if prob.rec[s] and m not in g.rend:
                    ready = ga - prob.rec[s] if knobs.jit else ga
                    cands.append(("R", m, max(g.free, ready, g.fend[m])))
                else:
                    cands.append(("B", m, max(g.free, ga)))
            m = g.nf
            if m < M and m in g.act and g.infl < knobs.caps[s]:
                cands.append(("F", m, max(g.free, g.act[m])))
        best = None
        for kind, m, est in cands:
            if kind == "F" and s < S - 1 and reserved(s):
                est = earliest_gap(res.setdefault((s, Direction.ACTIVATION), []), est,
                                   prob.fwd[s], prob.occ[s])
            elif kind == "B" and s > 0 and reserved(s - 1):
                est = earliest_gap(res.setdefault((s - 1, Direction.GRADIENT), []), est,
                                   prob.bwd[s], prob.occ[s - 1])
            key = (est, rank[kind], m // turn, p, m, s)
            if best is None or key < best[0]:
                best = (key, kind, m)
        return best

    heap: list = []
    ver: dict[tuple[int, int], int] = {}

    def push(p: int, s: int):
        c = candidate(p, s)
        v = ver[p, s] = ver.get((p, s), 0) + 1
        if c is not None:
            heapq.heappush(heap, (c[0], v, c[1], c[2], p, s))

    def send(p: int, k: int, d: Direction, m: int, ready: int, dirty: set):
        occ, lat = prob.occ[k], prob.lat[k]
        if reserved(k):
            t0 = ready
            insort(res.setdefault((k, d), []), (t0, t0 + occ))
            src = k if d is Direction.ACTIVATION else k + 1
            dirty.update((q, src) for q in range(n))
        else:
            t0 = max(ready, fifo.get((p, k, d), 0))
            fifo[p, k, d] = t0 + occ
        transfers.append((p, k, d, m, t0, occ, lat))
        return t0 + occ + lat

    for p in range(n):
        for s in range(S):
            push(p, s)
    expected = n * M * (2 * S + sum(1 for s in range(S) if prob.rec[s]))
    while heap:
        key, v, kind, m, p, s = heapq.heappop(heap)
        if ver[p, s] != v:
            continue
        start = key[0]
        end = start + dur(kind, s)
        g = st[p, s]
        g.free = end
        tasks.append((p, s, TaskKind(kind), m, start, end))
        dirty = {(p, s)}
        if kind == "F":
            g.fend[m] = end
            g.nf += 1
            g.infl += 1
            if s < S - 1:
                st[p, s + 1].act[m] = send(p, s, Direction.ACTIVATION, m, end, dirty)
                dirty.add((p, s + 1))
            else:
                last_fwd[p] += 1
                if not knobs.barrier:
                    g.grad[m] = end
                    heapq.heappush(g.bq, (end, m))
                elif last_fwd[p] == M:
                    for mm in range(M):
                        g.grad[mm] = g.fend[mm]
                        heapq.heappush(g.bq, (g.fend[mm], mm))
        elif kind == "R":
            g.rend[m] = end
            g.lock = m
        else:
            g.lock = None
            g.infl -= 1
            g.bdone.add(m)
            if s > 0:
                arrive = send(p, s - 1, Direction.GRADIENT, m, end, dirty)
                up = st[p, s - 1]
                up.grad[m] = arrive
                heapq.heappush(up.bq, (arrive, m))
                dirty.add((p, s - 1))
        for d in dirty:
            push(*d)
    if len(tasks) != expected:
        stuck = [f"p{p}s{s}" for (p, s), g in sorted(st.items()) if g.nf < M or len(g.bdone) < M]
        raise Deadlock(stuck[:8], expected - len(tasks))
    return tasks, transfers


def knobs_for(policy: str, prob: CellProblem, opts: ScheduleOptions) -> _Knobs:
    S, M = prob.S, prob.M
    if opts.mem_limit is not None and opts.mem_limit < 1:
        raise ValueError("mem_limit must be >= 1")
    extra = opts.mem_limit if opts.mem_limit is not None else M
    if policy == "gpipe":
        return _Knobs("FBR", False, tuple([min(M, extra)] * S), barrier=True)
    if policy == "onef1b":
        return _Knobs("BFR", False, tuple(min(S - s, extra) for s in range(S)))
    if policy == "varuna":
        return _Knobs("BRF", True, tuple([min(M, extra)] * S))
    if policy == "atlas":
        cap = opts.mem_limit if opts.mem_limit is not None else S
        return _Knobs("BFR", True, tuple([cap] * S), turn=opts.turn)
    raise ValueError(policy)


# --- building problems from plans --------------------------------------------

def wan_pair_bandwidth(topo: ClusterTopology, a: str, b: str, multi_conn: bool) -> float:
    lat = topo.wan.latency_ms(a, b)
    if multi_conn:
        n = connections_to_saturate(lat, topo.wan)
        return effective_pair_bandwidth(BandwidthQuery(lat, n), topo.wan)
    return min(single_tcp_bandwidth(lat, topo.wan), topo.wan.pair_bw_cap)


def cell_problem(plan: ParallelismPlan, model: ModelSpec, topo: ClusterTopology,
                 durations: Durations, policy: str, opts: ScheduleOptions) -> CellProblem:
    policy = canonical_policy(policy)
    dcs = plan.cells[0].stage_dcs
    S = len(dcs)
    n = plan.C if policy == "atlas" else 1
    nbytes = model.activation_bytes
    occ, lat, wan = [], [], []
    for a, b in zip(dcs, dcs[1:]):
        if a == b:
            dc = topo.dc(a)
            occ.append(ms_to_ns(nbytes / dc.intra_bw))
            lat.append(ms_to_ns(dc.intra_latency_ms))
            wan.append(False)
        else:
            bw = wan_pair_bandwidth(topo, a, b, opts.multi_conn) * n
            if topo.wan.aggregate_cap is not None:
                bw = min(bw, topo.wan.aggregate_cap)
            occ.append(ms_to_ns(nbytes / bw))
            lat.append(ms_to_ns(topo.wan.latency_ms(a, b)))
            wan.append(True)
    f, b, r = (ms_to_ns(durations.fwd_ms), ms_to_ns(durations.bwd_ms),
               ms_to_ns(durations.recompute_ms))
    rec = tuple(r if opts.recompute and s < S - 1 else 0 for s in range(S))
    return CellProblem(n, S, model.num_microbatches, (f,) * S, (b,) * S, rec,
                       tuple(occ), tuple(lat), tuple(wan), nbytes, policy == "atlas")


def materialize(raw: tuple[list[RawTask], list[RawTransfer]], prob: CellProblem,
                plan: ParallelismPlan, policy: str, opts: ScheduleOptions,
                cells: range | None = None) -> Schedule:
    """Expand raw cell records to every cell (and, for spatial policies, every rank)."""
    raw_tasks, raw_xfers = raw
    C = plan.C
    ranks = [(p, p) for p in range(C)] if prob.n == C else [(0, c) for c in range(C)]
    tasks, xfers = [], []
    for ci in (cells if cells is not None else range(plan.D)):
        cell = plan.cells[ci]
        for src, c in ranks:
            pipe = cell.pipelines[c]
            gid = ci * C + c
            for p, s, kind, m, a, e in raw_tasks:
                if p == src:
                    tasks.append(ScheduledTask(pipe[s].gpu, gid, ci, kind, m, s, a, e))
            for p, k, d, m, t0, occ, lat in raw_xfers:
                if p == src:
                    xfers.append(ScheduledTransfer(ci, gid, m, k, d, prob.nbytes, t0, t0 + occ + lat,
                                                   lat, prob.n if prob.pooled and prob.wan[k] else 1,
                                                   prob.wan[k]))
    tasks.sort(key=lambda t: (t.start_ns, t.cell, t.pipeline, t.stage, t.microbatch, t.kind.value))
    xfers.sort(key=lambda x: (x.start_ns, x.cell, x.pipeline, x.boundary, x.direction.value, x.microbatch))
    mem = None
    if policy == "atlas":
        mem = opts.mem_limit if opts.mem_limit is not None else prob.S
    sched = Schedule(tasks, xfers, policy, prob.S, prob.M, mem)
    sched.meta.update(pooled=prob.pooled, cells=plan.D, C=C,
                      recompute=tuple(bool(r) for r in prob.rec))
    return sched


def schedule_problem(prob: CellProblem, policy: str, opts: ScheduleOptions = ScheduleOptions()):
    """Run a policy on a bare problem; returns raw records."""
    policy = canonical_policy(policy)
    if policy == "atlas" and not prob.pooled:
        prob = replace(prob, pooled=True)
    return list_schedule(prob, knobs_for(policy, prob, opts))


def cell_makespan_ns(prob: CellProblem, policy: str, opts: ScheduleOptions = ScheduleOptions()) -> int:
    tasks, xfers = schedule_problem(prob, policy, opts)
    return max([t[5] for t in tasks] + [x[4] + x[5] + x[6] for x in xfers])


def make_schedule(plan: ParallelismPlan, model: ModelSpec, topo: ClusterTopology,
                  durations: Durations, policy: str,
                  opts: ScheduleOptions = ScheduleOptions()) -> Schedule:
    policy = canonical_policy(policy)
    prob = cell_problem(plan, model, topo, durations, policy, opts)
    raw = list_schedule(prob, knobs_for(policy, prob, opts))
    return materialize(raw, prob, plan, policy, opts)


def gpipe_schedule(plan, model, topo, durations, opts=ScheduleOptions()) -> Schedule:
    return make_schedule(plan, model, topo, durations, "gpipe", opts)


def onef1b_schedule(plan, model, topo, durations, opts=ScheduleOptions()) -> Schedule:
    return make_schedule(plan, model, topo, durations, "onef1b", opts)


def varuna_schedule(plan, model, topo, durations, opts=ScheduleOptions()) -> Schedule:
    return make_schedule(plan, model, topo, durations, "varuna", opts)


def atlas_schedule(plan, model, topo, durations, opts=ScheduleOptions()) -> Schedule:
    return make_schedule(plan, model, topo, durations, "atlas", opts)


def stage_allreduce_ms(plan: ParallelismPlan, model: ModelSpec, topo: ClusterTopology) -> list[float]:
    """All-reduce time of each stage's gradients over its D*C replicas."""
    from .comm import allreduce_time

    N = plan.num_pipelines
    out = []
    for st in plan.cells[0].pipelines[0]:
        params = sum(model.partition_layers(k) for k in range(*st.partitions)) * model.layer_params
        # TP shards each reduce their own slice in parallel
        out.append(allreduce_time(params / st.tp_degree, N, topo.dc(st.dc_id).intra_bw))
    return out


def append_allreduce(schedule: Schedule, plan: ParallelismPlan, model: ModelSpec,
                     topo: ClusterTopology) -> Schedule:
    """Add one AllReduce task per stage replica after the stage's last backward.

    The ring needs every replica, so it starts once the slowest replica of
    the stage has finished. A single replica gets a zero-length marker.
    """
    durs = stage_allreduce_ms(plan, model, topo)
    last: dict[int, int] = {}
    for t in schedule.tasks:
        if t.kind is TaskKind.BACKWARD:
            last[t.stage] = max(last.get(t.stage, 0), t.end_ns)
    extra = []
    for ci, cell in enumerate(plan.cells):
        for c, pipe in enumerate(cell.pipelines):
            for k, st in enumerate(pipe):
                a = last.get(k, 0)
                extra.append(ScheduledTask(st.gpu, ci * plan.C + c, ci, TaskKind.ALLREDUCE, -1, k,
                                           a, a + ms_to_ns(durs[k])))
    out = Schedule(schedule.tasks + extra, list(schedule.transfers), schedule.policy,
                   schedule.num_stages, schedule.num_microbatches, schedule.mem_limit,
                   dict(schedule.meta))
    out.meta["allreduce_ms"] = max(durs, default=0.0)
    return out
