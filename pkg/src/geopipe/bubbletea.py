"""Fill training bubbles with inference prefill work.

Prefill pipelines are built from GPUs that hold the same stage and rank in
every DP-cell; those GPUs sit in one DC and go idle in the same rhythm.
Requests are admitted first-come first-served on the first pipeline that
can run every stage inside idle time, so training tasks never move.
"""
from __future__ import annotations

import bisect
import csv
import io
import random
from dataclasses import dataclass, field
from typing import Callable

from .comm import TensorShape, activation_bytes, transfer_time
from .timeline import Schedule, ScheduledTask, TaskKind, ms_to_ns, ns_to_ms
from .workload import ParallelismPlan

MAX_TOKENS = 8192
FULL_PREFILL_MS = 300.0  # 8K tokens saturate the GPU
DEFAULT_STAGE_BW = 25_000_000.0  # bytes/ms, calibrated to the 86 ms / N=32 anchor
GIB = 1 << 30
NO_CAPACITY = "NoCapacity"


@dataclass(frozen=True)
class Bubble:
    gpu: str
    start_ns: int
    end_ns: int

    @property
    def length_ms(self) -> float:
        return ns_to_ms(self.end_ns - self.start_ns)


@dataclass(frozen=True)
class PrefillRequest:
    id: str
    arrival_ms: float
    tokens: int
    model_id: str = "default"

    def __post_init__(self):
        if not 1 <= self.tokens <= MAX_TOKENS:
            raise ValueError(f"request {self.id}: tokens must be in 1..{MAX_TOKENS}")


@dataclass(frozen=True)
class PrefillPipeline:
    gpus: tuple[str, ...]
    dc_id: str
    layers_per_gpu: float = 1.0
    memory_bytes: float = 0.0
    budget_bytes: float = GIB

    def __post_init__(self):
        if not self.gpus:
            raise ValueError("a prefill pipeline needs at least one GPU")
        if any(not g.startswith(self.dc_id + ":") for g in self.gpus):
            raise ValueError("prefill pipelines stay inside one datacenter")
        if self.memory_bytes > self.budget_bytes:
            raise ValueError("prefill model slice exceeds the per-GPU memory budget")


@dataclass(frozen=True)
class Placement:
    request: PrefillRequest
    pipeline: int
    intervals: tuple[tuple[str, int, int], ...]  # (gpu, start_ns, end_ns) per stage

    @property
    def start_ms(self) -> float:
        return ns_to_ms(self.intervals[0][1])

    @property
    def finish_ms(self) -> float:
        return ns_to_ms(self.intervals[-1][2])


@dataclass
class PlacementResult:
    accepted: list[Placement]
    rejected: list[tuple[PrefillRequest, str]]
    timeline: Schedule
    extra: dict = field(default_factory=dict)


def prefill_duration(tokens: int, curve: Callable[[int], float] | None = None,
                     max_tokens: int = MAX_TOKENS) -> float:
    """Milliseconds to prefill ``tokens`` on one whole GPU (linear up to 8K)."""
    if not 1 <= tokens <= max_tokens:
        raise ValueError(f"tokens must be in 1..{max_tokens}")
    if curve is not None:
        return curve(tokens)
    return FULL_PREFILL_MS * tokens / 8192


def prefill_pp_overhead(shape: TensorShape, n_boundaries: int,
                        stage_bw: float = DEFAULT_STAGE_BW, latency_ms: float = 0.0) -> float:
    """Extra time-to-first-token from handing activations across N stage boundaries."""
    if n_boundaries < 0:
        raise ValueError("n_boundaries must be >= 0")
    return n_boundaries * transfer_time(activation_bytes(shape), stage_bw, latency_ms)


def extract_bubbles(t: Schedule, horizon_ms: float | None = None,
                    gpus: list[str] | None = None) -> dict[str, list[Bubble]]:
    """Maximal idle intervals per GPU inside [0, horizon] (horizon defaults to makespan)."""
    horizon = t.makespan_ns if horizon_ms is None else ms_to_ns(horizon_ms)
    by_gpu = t.by_gpu()
    out = {}
    for g in gpus or sorted(by_gpu):
        cur = 0
        gaps = []
        for task in by_gpu.get(g, []):
            a, b = min(task.start_ns, horizon), min(task.end_ns, horizon)
            if a > cur:
                gaps.append(Bubble(g, cur, a))
            cur = max(cur, b)
        if horizon > cur:
            gaps.append(Bubble(g, cur, horizon))
        out[g] = gaps
    return out


def utilization(t: Schedule, horizon_ms: float | None = None, gpus: list[str] | None = None) -> float:
    """Mean busy fraction over GPUs within [0, horizon]."""
    horizon = t.makespan_ns if horizon_ms is None else ms_to_ns(horizon_ms)
    by_gpu = t.by_gpu()
    names = gpus or sorted(by_gpu)
    if not names or horizon <= 0:
        return 0.0
    total = 0
    for g in names:
        total += sum(max(0, min(x.end_ns, horizon) - max(x.start_ns, 0)) for x in by_gpu.get(g, []))
    return total / (len(names) * horizon)


def prefill_pipelines(plan: ParallelismPlan, model_bytes: float = 0.0,
                      budget_bytes: float = GIB) -> list[PrefillPipeline]:
    """One pipeline per (stage, rank): that GPU in every DP-cell, cell order."""
    out = []
    first = plan.cells[0]
    for k in range(plan.num_stages):
        for c in range(plan.C):
            gpus = tuple(cell.pipelines[c][k].gpu for cell in plan.cells)
            dc = first.pipelines[c][k].dc_id
            out.append(PrefillPipeline(gpus, dc, 1.0, model_bytes / len(gpus), budget_bytes))
    return out


class _FreeMap:
    """Idle intervals of one GPU, shrinking as prefills are placed."""

    def __init__(self, bubbles: list[Bubble], guard_ns: int):
        # a guard keeps a gap before the next training task
        self.iv = [(b.start_ns, b.end_ns - guard_ns) for b in bubbles if b.end_ns - guard_ns > b.start_ns]

    def earliest(self, t: int, d: int) -> int | None:
        i = max(bisect.bisect_right(self.iv, (t, float("inf"))) - 1, 0)
        for a, b in self.iv[i:]:
            s = max(a, t)
            if s + d <= b:
                return s
        return None

    def take(self, s: int, e: int):
        for i, (a, b) in enumerate(self.iv):
            if a <= s and e <= b:
                parts = [(a, s)] if s > a else []
                if b > e:
                    parts.append((e, b))
                self.iv[i:i + 1] = parts
                return
        raise AssertionError("interval is not free")


def schedule_prefills(t: Schedule, requests: list[PrefillRequest], pipelines: list[PrefillPipeline],
                      hidden: int = 4096, stage_bw: float = DEFAULT_STAGE_BW,
                      latency_ms: float = 0.0, guard_ms: float = 0.0, horizon_ms: float | None = None,
                      curve: Callable[[int], float] | None = None,
                      handoff_ms: float = 0.0) -> PlacementResult:
    """Place prefills inside bubbles; training tasks come back untouched.

    Each stage of a request runs ``prefill_duration / len(pipeline)`` on its
    GPU; stage i+1 may start once stage i is done and its activation has
    crossed to the next GPU. ``handoff_ms`` models the KV-cache hand-off to
    a decode GPU and only shifts the reported completion.
    """
    guard = ms_to_ns(guard_ms)
    bubbles = extract_bubbles(t, horizon_ms)
    free = {g: _FreeMap(bs, guard) for g, bs in bubbles.items()}
    for pl in pipelines:
        for g in pl.gpus:
            free.setdefault(g, _FreeMap([], guard))
    accepted: list[Placement] = []
    rejected: list[tuple[PrefillRequest, str]] = []
    extra_tasks: list[ScheduledTask] = []
    order = sorted(range(len(requests)), key=lambda i: (requests[i].arrival_ms, i))
    for i in order:
        req = requests[i]
        full = prefill_duration(req.tokens, curve)
        placed = None
        for pi, pl in enumerate(pipelines):
            d = max(1, ms_to_ns(full / len(pl.gpus)))
            hop = ms_to_ns(transfer_time(activation_bytes(TensorShape(1, req.tokens, hidden)),
                                         stage_bw, latency_ms))
            cur = ms_to_ns(req.arrival_ms)
            iv = []
            for g in pl.gpus:
                s = free[g].earliest(cur, d)
                if s is None:
                    break
                iv.append((g, s, s + d))
                cur = s + d + hop
            if len(iv) == len(pl.gpus):
                placed = Placement(req, pi, tuple(iv))
                break
        if placed is None:
            rejected.append((req, NO_CAPACITY))
            continue
        accepted.append(placed)
        for k, (g, s, e) in enumerate(placed.intervals):
            free[g].take(s, e)
            extra_tasks.append(ScheduledTask(g, -1, -1, TaskKind.PREFILL, i, k, s, e))
    tasks = list(t.tasks) + extra_tasks
    tasks.sort(key=lambda x: (x.start_ns, x.kind is TaskKind.PREFILL, x.cell, x.pipeline,
                              x.stage, x.microbatch))
    out = Schedule(tasks, list(t.transfers), t.policy, t.num_stages, t.num_microbatches,
                   t.mem_limit, dict(t.meta))
    return PlacementResult(accepted, rejected, out, {"handoff_ms": handoff_ms, "hidden": hidden})


def ttft_overhead_ms(p: Placement, curve=None) -> float:
    """Delay beyond running the prefill alone on one GPU at arrival."""
    return p.finish_ms - p.request.arrival_ms - prefill_duration(p.request.tokens, curve)


def training_tasks(t: Schedule) -> list[ScheduledTask]:
    return [x for x in t.tasks if x.kind is not TaskKind.PREFILL]


def synthetic_requests(n: int, horizon_ms: float, seed: int = 0, max_tokens: int = MAX_TOKENS,
                       min_tokens: int = 64) -> list[PrefillRequest]:
    """A saturating stream: arrivals spread over the iteration, sizes log-uniform."""
    rng = random.Random(seed)
    out = []
    for i in range(n):
        arrival = round(rng.uniform(0.0, horizon_ms), 3)
        tokens = int(round(2 ** rng.uniform(_log2(min_tokens), _log2(max_tokens))))
        out.append(PrefillRequest(f"r{i}", arrival, max(1, min(max_tokens, tokens))))
    out.sort(key=lambda r: (r.arrival_ms, r.id))
    return out


def _log2(x: float) -> float:
    import math
    return math.log2(x)


def read_requests(text: str) -> list[PrefillRequest]:
    """Parse ``id,arrival_ms,tokens`` rows (a header row is optional)."""
    out = []
    for row in csv.reader(io.StringIO(text)):
        if not row or row[0].strip().lower() == "id":
            continue
        if len(row) < 3:
            raise ValueError(f"bad request row: {row}")
        out.append(PrefillRequest(row[0].strip(), float(row[1]), int(row[2])))
    return out


def results_csv(res: PlacementResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "accepted", "pipeline", "start_ms", "ttft_overhead_ms", "reason"])
    rows = [(p.request, True, p.pipeline, p.start_ms, ttft_overhead_ms(p), "") for p in res.accepted]
    rows += [(r, False, "", "", "", why) for r, why in res.rejected]
    rows.sort(key=lambda x: (x[0].arrival_ms, x[0].id))
    for r, ok, pi, st, ov, why in rows:
        w.writerow([r.id, int(ok), pi, "" if st == "" else repr(st), "" if ov == "" else repr(ov), why])
    return buf.getvalue()
