"""Discrete-event executor for schedules.

The engine replays a schedule's per-GPU task order and per-link message
order against the resources, starting each item the moment its inputs have
landed and its GPU or link is free. ATLAS schedules are executed as
reservations: nothing starts before its planned time. Online policies run
greedily; their only timing hint is that a just-in-time recompute becomes
ready ``r`` before its gradient lands, which is known once the gradient is
on the wire.

Events are ordered by (time, kind, cell, pipeline, microbatch, stage), so
identical inputs always produce the same timeline.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, replace
from enum import IntEnum

from .errors import Deadlock
from .scheduler import ScheduleOptions, append_allreduce, canonical_policy, make_schedule
from .timeline import Direction, Schedule, ScheduledTask, ScheduledTransfer, TaskKind
from .topology import ClusterTopology
from .workload import Durations, ModelSpec, ParallelismPlan


class EventKind(IntEnum):
    TASK_DONE = 0
    TRANSFER_DONE = 1
    RESOURCE_FREE = 2
    TASK_READY = 3


@dataclass(order=True, frozen=True)
class Event:
    time_ns: int
    kind: EventKind
    cell: int
    pipeline: int
    microbatch: int
    stage: int
    seq: int  # insertion counter, final tie-break


_JIT_POLICIES = ("varuna", "atlas")


def _tkey(t: ScheduledTask):
    return ("T", t.pipeline, t.stage, t.kind, t.microbatch, t.gpu)


def _xkey(x: ScheduledTransfer):
    return ("X", x.pipeline, x.boundary, x.direction, x.microbatch)


def _channel(x: ScheduledTransfer, pooled: bool):
    if pooled and x.wan:
        return ("pool", x.cell, x.boundary, x.direction)
    return ("link", x.cell, x.pipeline, x.boundary, x.direction)


def execute(schedule: Schedule) -> Schedule:
    """Run ``schedule`` through the event queue and return the realized timeline."""
    policy = schedule.policy
    reserved = policy == "atlas"
    jit = policy in _JIT_POLICIES
    pooled = bool(schedule.meta.get("pooled"))
    S = schedule.num_stages

    tasks = {_tkey(t): t for t in schedule.tasks}
    xfers = {_xkey(x): x for x in schedule.transfers}

    # what each item waits for (besides its resource)
    deps: dict[tuple, list[tuple]] = {}
    last_b: dict[int, list[tuple]] = {}
    for k, t in tasks.items():
        p, s, m = t.pipeline, t.stage, t.microbatch
        d = []
        if t.kind is TaskKind.FORWARD and s > 0:
            d.append(("X", p, s - 1, Direction.ACTIVATION, m))
        elif t.kind is TaskKind.BACKWARD:
            if s < S - 1:
                d.append(("X", p, s, Direction.GRADIENT, m))
            else:
                d.append(("T", p, s, TaskKind.FORWARD, m, t.gpu))
            rk = ("T", p, s, TaskKind.RECOMPUTE, m, t.gpu)
            if rk in tasks:
                d.append(rk)
            last_b.setdefault(s, []).append(k)
        elif t.kind is TaskKind.RECOMPUTE:
            d.append(("T", p, s, TaskKind.FORWARD, m, t.gpu))
        deps[k] = [x for x in d if x in tasks or x in xfers]
    for k, t in tasks.items():
        if t.kind is TaskKind.ALLREDUCE:
            deps[k] = list(last_b.get(t.stage, []))
    gpu_of_stage = {}
    for t in schedule.tasks:
        gpu_of_stage[t.pipeline, t.stage] = t.gpu
    for k, x in xfers.items():
        src = x.src_stage
        kind = TaskKind.FORWARD if x.direction is Direction.ACTIVATION else TaskKind.BACKWARD
        deps[k] = [("T", x.pipeline, src, kind, x.microbatch, gpu_of_stage.get((x.pipeline, src)))]

    # resource queues in planned order
    queues: dict[tuple, list[tuple]] = {}
    for k, t in sorted(tasks.items(), key=lambda kv: (kv[1].start_ns, kv[1].end_ns, kv[1].kind is TaskKind.ALLREDUCE)):
        queues.setdefault(("gpu", t.gpu), []).append(k)
    for k, x in sorted(xfers.items(), key=lambda kv: (kv[1].start_ns, kv[1].pipeline, kv[1].microbatch)):
        queues.setdefault(_channel(x, pooled), []).append(k)
    res_of = {k: r for r, ks in queues.items() for k in ks}
    head = {r: 0 for r in queues}
    busy_until = {r: 0 for r in queues}

    done_at: dict[tuple, int] = {}
    started: dict[tuple, int] = {}
    jit_ready: dict[tuple, int] = {}
    realized_t: dict[tuple, ScheduledTask] = {}
    realized_x: dict[tuple, ScheduledTransfer] = {}
    heap: list[Event] = []
    payload: dict[int, object] = {}
    seq = 0

    def post(time_ns, kind, item, ident=(0, 0, 0, 0)):
        nonlocal seq
        seq += 1
        payload[seq] = item
        heapq.heappush(heap, Event(time_ns, kind, *ident, seq))

    def ident(k):
        obj = tasks.get(k) or xfers.get(k)
        st = obj.stage if isinstance(obj, ScheduledTask) else obj.boundary
        return (obj.cell, obj.pipeline, obj.microbatch, st)

    def ready_time(k, now):
        """Earliest start given finished inputs, or None if an input is pending."""
        t = 0
        for d in deps[k]:
            if d not in done_at:
                return None
            t = max(t, done_at[d])
        if k in tasks and tasks[k].kind is TaskKind.RECOMPUTE:
            p, s, _, m, _ = k[1], k[2], k[3], k[4], k[5]
            g = ("X", p, s, Direction.GRADIENT, m)
            if g in xfers:
                if jit:
                    if g not in jit_ready:
                        return None
                    t = max(t, jit_ready[g] - tasks[k].duration_ns)
                else:
                    if g not in done_at:
                        return None
                    t = max(t, done_at[g])
        if reserved:
            planned = tasks[k].start_ns if k in tasks else xfers[k].start_ns
            t = max(t, planned)
        return t

    def try_start(r, now):
        i = head[r]
        q = queues[r]
        if i >= len(q) or busy_until[r] > now:
            return
        k = q[i]
        if k in started:
            return
        t = ready_time(k, now)
        if t is None:
            return
        t = max(t, busy_until[r])
        if t > now:
            post(t, EventKind.TASK_READY, r, ident(k))
            return
        started[k] = now
        if k in tasks:
            pl = tasks[k]
            end = now + pl.duration_ns
            realized_t[k] = replace(pl, start_ns=now, end_ns=end)
            busy_until[r] = end
            post(end, EventKind.TASK_DONE, k, ident(k))
            if pl.kind is TaskKind.BACKWARD and pl.stage > 0:
                # the gradient's landing time is predictable once its producer runs
                g = ("X", pl.pipeline, pl.stage - 1, Direction.GRADIENT, pl.microbatch)
                if g in xfers and g not in jit_ready:
                    gx = xfers[g]
                    ch = res_of[g]
                    leave = max(end, busy_until[ch])
                    if reserved:
                        leave = max(leave, gx.start_ns)
                    jit_ready[g] = leave + (gx.busy_end_ns - gx.start_ns) + gx.latency_ns
                    _poke_recompute(gx, now)
        else:
            pl = xfers[k]
            busy = pl.busy_end_ns - pl.start_ns
            end = now + busy + pl.latency_ns
            realized_x[k] = replace(pl, start_ns=now, end_ns=end)
            busy_until[r] = now + busy
            changed = jit_ready.get(k) != end
            jit_ready[k] = end
            post(now + busy, EventKind.RESOURCE_FREE, r, ident(k))
            post(end, EventKind.TRANSFER_DONE, k, ident(k))
            if changed and pl.direction is Direction.GRADIENT:
                _poke_recompute(pl, now)
        head[r] = i + 1 if k in started else i

    def _poke_recompute(x, now):
        rk = ("T", x.pipeline, x.boundary, TaskKind.RECOMPUTE, x.microbatch,
              gpu_of_stage.get((x.pipeline, x.boundary)))
        if rk in res_of:
            try_start(res_of[rk], now)

    # reverse dependency index: who to poke when something finishes
    waiters: dict[tuple, set] = {}
    for k, ds in deps.items():
        for d in ds:
            waiters.setdefault(d, set()).add(res_of[k])

    for r in sorted(queues, key=str):
        try_start(r, 0)
    while heap:
        ev = heapq.heappop(heap)
        item = payload.pop(ev.seq)
        now = ev.time_ns
        if ev.kind in (EventKind.TASK_DONE, EventKind.TRANSFER_DONE):
            done_at[item] = now
            for r in sorted(waiters.get(item, ()), key=str):
                try_start(r, now)
            if ev.kind is EventKind.TASK_DONE:
                try_start(res_of[item], now)
        else:
            try_start(item, now)

    total = len(tasks) + len(xfers)
    if len(done_at) != total:
        raise Deadlock(_find_cycle(queues, head, deps, done_at), total - len(done_at))

    out = Schedule(sorted(realized_t.values(), key=lambda t: (t.start_ns, t.cell, t.pipeline, t.stage, t.microbatch, t.kind.value)),
                   sorted(realized_x.values(), key=lambda x: (x.start_ns, x.cell, x.pipeline, x.boundary, x.direction.value, x.microbatch)),
                   schedule.policy, schedule.num_stages, schedule.num_microbatches,
                   schedule.mem_limit, dict(schedule.meta))
    return out


def _find_cycle(queues, head, deps, done_at) -> list[str]:
    """Follow 'waits for' edges from a blocked resource head until one repeats."""
    pred = {}
    for r, q in queues.items():
        for i, k in enumerate(q):
            if i > 0:
                pred[k] = q[i - 1]

    def blocker(k):
        for d in deps.get(k, []):
            if d not in done_at:
                return d
        p = pred.get(k)
        if p is not None and p not in done_at:
            return p
        return None

    start = None
    for r, q in sorted(queues.items(), key=lambda kv: str(kv[0])):
        if head[r] < len(q):
            start = q[head[r]]
            break
    path, seen = [], {}
    k = start
    while k is not None and k not in seen:
        seen[k] = len(path)
        path.append(k)
        k = blocker(k)
    if k is None:
        return [_fmt(x) for x in path]
    return [_fmt(x) for x in path[seen[k]:]] + [_fmt(k)]


def _fmt(k) -> str:
    if k[0] == "T":
        return f"{k[3].value}(pipe={k[1]},stage={k[2]},mb={k[4]})"
    return f"{k[3].value}(pipe={k[1]},boundary={k[2]},mb={k[4]})"


def run(plan: ParallelismPlan, policy: str, model: ModelSpec, topo: ClusterTopology,
        durations: Durations, options: ScheduleOptions = ScheduleOptions(),
        allreduce: bool = False) -> Schedule:
    """Generate the policy's schedule for ``plan`` and execute it."""
    policy = canonical_policy(policy)
    sched = make_schedule(plan, model, topo, durations, policy, options)
    if allreduce:
        sched = append_allreduce(sched, plan, model, topo)
    return execute(sched)


def iteration_time(t: Schedule) -> float:
    return t.makespan_ms


def slowdown(t: Schedule, baseline: Schedule) -> float:
    return t.makespan_ns / baseline.makespan_ns
