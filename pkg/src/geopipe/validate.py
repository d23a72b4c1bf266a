"""Schedule validity checks shared by tests, the engine and the CLI.

``violations`` returns human-readable strings; an empty list means the
schedule passed every check that applies to its policy.
"""
from __future__ import annotations

from collections import defaultdict

from .timeline import Direction, Schedule, TaskKind

_TRAINING = (TaskKind.FORWARD, TaskKind.BACKWARD, TaskKind.RECOMPUTE)


def _channel(x, pooled: bool):
    if pooled and x.wan:
        return (x.cell, x.boundary, x.direction)
    return (x.cell, x.pipeline, x.boundary, x.direction)


def violations(s: Schedule, limit: int = 20) -> list[str]:
    out: list[str] = []
    pooled = bool(s.meta.get("pooled"))
    S, M = s.num_stages, s.num_microbatches

    # no overlap on a GPU
    for gpu, tasks in s.by_gpu().items():
        for a, b in zip(tasks, tasks[1:]):
            if b.start_ns < a.end_ns:
                out.append(f"{gpu}: {a.name}@{a.stage} overlaps {b.name}@{b.stage}")
    for t in s.tasks:
        if t.end_ns < t.start_ns or (t.kind in _TRAINING and t.end_ns == t.start_ns) or t.start_ns < 0:
            out.append(f"bad interval for {t}")

    idx = {}
    for t in s.tasks:
        if t.kind in _TRAINING:
            key = (t.pipeline, t.stage, t.kind, t.microbatch)
            if key in idx:
                out.append(f"duplicate task {key}")
            idx[key] = t
    xf = {}
    for x in s.transfers:
        key = (x.pipeline, x.boundary, x.direction, x.microbatch)
        if key in xf:
            out.append(f"duplicate transfer {key}")
        xf[key] = x

    pipes = sorted({t.pipeline for t in s.tasks if t.kind in _TRAINING})
    for p in pipes:
        for st in range(S):
            for m in range(M):
                f = idx.get((p, st, TaskKind.FORWARD, m))
                b = idx.get((p, st, TaskKind.BACKWARD, m))
                r = idx.get((p, st, TaskKind.RECOMPUTE, m))
                if f is None or b is None:
                    out.append(f"missing F/B for pipe {p} stage {st} mb {m}")
                    continue
                if st > 0:
                    a = xf.get((p, st - 1, Direction.ACTIVATION, m))
                    if a is None:
                        out.append(f"missing activation into pipe {p} stage {st} mb {m}")
                    else:
                        prod = idx.get((p, st - 1, TaskKind.FORWARD, m))
                        if prod is not None and a.start_ns < prod.end_ns:
                            out.append(f"activation leaves before its forward ends ({p},{st - 1},{m})")
                        if f.start_ns < a.end_ns:
                            out.append(f"forward starts before activation lands ({p},{st},{m})")
                if st < S - 1:
                    g = xf.get((p, st, Direction.GRADIENT, m))
                    if g is None:
                        out.append(f"missing gradient into pipe {p} stage {st} mb {m}")
                    else:
                        prod = idx.get((p, st + 1, TaskKind.BACKWARD, m))
                        if prod is not None and g.start_ns < prod.end_ns:
                            out.append(f"gradient leaves before its backward ends ({p},{st + 1},{m})")
                        if b.start_ns < g.end_ns:
                            out.append(f"backward starts before gradient lands ({p},{st},{m})")
                elif b.start_ns < f.end_ns:
                    out.append(f"last-stage backward before forward ({p},{m})")
                if r is not None:
                    if r.start_ns < f.end_ns or b.start_ns < r.end_ns:
                        out.append(f"recompute out of order ({p},{st},{m})")
                if b.start_ns < f.end_ns:
                    out.append(f"backward before forward ({p},{st},{m})")
            if len(out) > limit:
                return out

    # link exclusivity, measured on the busy part of each message
    chans = defaultdict(list)
    for x in s.transfers:
        chans[_channel(x, pooled)].append(x)
    for key, xs in chans.items():
        xs.sort(key=lambda x: (x.start_ns, x.busy_end_ns))
        for a, b in zip(xs, xs[1:]):
            if b.start_ns < a.busy_end_ns:
                out.append(f"transfers overlap on {key}: mb {a.microbatch} and mb {b.microbatch}")
    if s.policy == "atlas":
        out.extend(_atlas_rules(s, idx, xf))
    return out[:limit] if len(out) > limit else out


def _atlas_rules(s: Schedule, idx, xf) -> list[str]:
    out = []
    # a WAN message leaves exactly when the compute that made it ends
    for x in s.transfers:
        if not x.wan:
            continue
        kind = TaskKind.FORWARD if x.direction is Direction.ACTIVATION else TaskKind.BACKWARD
        prod = idx.get((x.pipeline, x.src_stage, kind, x.microbatch))
        if prod is not None and prod.end_ns != x.start_ns:
            out.append(f"WAN message of mb {x.microbatch} waits after its producer")
    # recompute is immediately followed by its backward on the GPU
    for gpu, tasks in s.by_gpu().items():
        tasks = [t for t in tasks if t.kind in _TRAINING]
        for a, b in zip(tasks, tasks[1:]):
            if a.kind is TaskKind.RECOMPUTE and not (b.kind is TaskKind.BACKWARD and b.microbatch == a.microbatch):
                out.append(f"{gpu}: recompute {a.microbatch} not followed by its backward")
    if s.mem_limit is not None:
        for (p, st), peak in peak_inflight(s).items():
            if peak > s.mem_limit:
                out.append(f"pipe {p} stage {st} holds {peak} activations > {s.mem_limit}")
    return out


def peak_inflight(s: Schedule) -> dict[tuple[int, int], int]:
    """Largest number of microbatches held per (pipeline, stage).

    A microbatch is held from the start of its forward to the end of its
    backward.
    """
    ev = defaultdict(list)
    for t in s.tasks:
        if t.kind is TaskKind.FORWARD:
            ev[t.pipeline, t.stage].append((t.start_ns, 1))
        elif t.kind is TaskKind.BACKWARD:
            ev[t.pipeline, t.stage].append((t.end_ns, -1))
    peaks = {}
    for key, es in ev.items():
        es.sort(key=lambda e: (e[0], e[1]))  # releases before acquisitions at equal time
        cur = best = 0
        for _, d in es:
            cur += d
            best = max(best, cur)
        peaks[key] = best
    return peaks


def idle_windows(s: Schedule, gpu: str) -> list[tuple[int, int]]:
    """Maximal idle gaps between the first and last task on a GPU."""
    tasks = s.by_gpu().get(gpu, [])
    gaps = []
    for a, b in zip(tasks, tasks[1:]):
        if b.start_ns > a.end_ns:
            gaps.append((a.end_ns, b.start_ns))
    return gaps
