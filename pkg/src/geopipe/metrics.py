"""Headline numbers derived from a timeline."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

from .timeline import Direction, Schedule, TaskKind, ns_to_ms


@dataclass
class MetricsReport:
    iteration_ms: float
    throughput_iters_per_s: float
    gpu_utilization: dict[str, float]
    mean_utilization: float
    bubble_fraction: float
    slowdown_vs_reference: float | None
    wan_busy_fraction: dict[str, float] = field(default_factory=dict)
    policy: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def _busy(tasks, horizon: int) -> int:
    return sum(max(0, min(t.end_ns, horizon) - max(t.start_ns, 0)) for t in tasks)


def _training_horizon(t: Schedule) -> int:
    ends = [x.end_ns for x in t.tasks if x.kind is not TaskKind.PREFILL]
    ends += [x.end_ns for x in t.transfers]
    return max(ends, default=0)


def report(t: Schedule, reference: Schedule | None = None) -> MetricsReport:
    """Aggregate a timeline; utilization is measured over the training iteration."""
    horizon = _training_horizon(t)
    by_gpu = t.by_gpu()
    util = {g: (_busy(by_gpu[g], horizon) / horizon if horizon else 0.0) for g in sorted(by_gpu)}
    mean = sum(util.values()) / len(util) if util else 0.0
    wan: dict[str, float] = {}
    for d in Direction:
        chans: dict[tuple, int] = {}
        for x in t.transfers:
            if x.wan and x.direction is d:
                key = (x.cell, x.boundary) if t.meta.get("pooled") else (x.cell, x.pipeline, x.boundary)
                chans[key] = chans.get(key, 0) + x.busy_end_ns - x.start_ns
        wan[d.value] = (sum(chans.values()) / (len(chans) * horizon)) if chans and horizon else 0.0
    it_ms = ns_to_ms(horizon)
    slow = None
    if reference is not None:
        ref = _training_horizon(reference)
        slow = horizon / ref if ref else float("inf")
    return MetricsReport(
        iteration_ms=it_ms,
        throughput_iters_per_s=1000.0 / it_ms if it_ms else 0.0,
        gpu_utilization=util,
        mean_utilization=mean,
        bubble_fraction=1.0 - mean,
        slowdown_vs_reference=slow,
        wan_busy_fraction=wan,
        policy=t.policy,
    )


def report_csv(r: MetricsReport) -> str:
    """One ``metric,value`` row per scalar, then one row per GPU."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    w.writerow(["policy", r.policy])
    w.writerow(["iteration_ms", repr(r.iteration_ms)])
    w.writerow(["throughput_iters_per_s", repr(r.throughput_iters_per_s)])
    w.writerow(["mean_utilization", repr(r.mean_utilization)])
    w.writerow(["bubble_fraction", repr(r.bubble_fraction)])
    w.writerow(["slowdown_vs_reference", "" if r.slowdown_vs_reference is None else repr(r.slowdown_vs_reference)])
    for d, v in sorted(r.wan_busy_fraction.items()):
        w.writerow([f"wan_busy_{d}", repr(v)])
    for g, v in r.gpu_utilization.items():
        w.writerow([f"util:{g}", repr(v)])
    return buf.getvalue()


def report_json(r: MetricsReport) -> str:
    return json.dumps(r.as_dict(), indent=2, sort_keys=True)


def selection_csv(rep) -> str:
    """Rows of a dc_select report, one per candidate D."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["D", "partitions", "pp_time_ms", "allreduce_time_ms", "total_time_ms",
                "throughput", "gpus_used", "chosen"])
    for row in rep.rows:
        parts = " ".join(f"{dc}={k}" for dc, k in row.partitions)
        w.writerow([row.D, parts, repr(row.pp_time_ms), repr(row.allreduce_time_ms),
                    repr(row.total_time_ms), repr(row.throughput), row.gpus_used,
                    int(row.D == rep.chosen_D)])
    return buf.getvalue()
