"""Chrome trace and CSV writers for schedules and timelines.

Chrome trace events (``chrome://tracing`` / Perfetto):
``{"name", "cat", "ph": "X", "ts", "dur", "pid", "tid", "args"}`` with
``ts``/``dur`` in microseconds, ``pid`` = ``cell<i>/pipe<j>`` and
``tid`` = GPU id. Network messages go on ``pid`` = ``net``.

Task CSV columns: ``gpu,cell,pipeline,stage,microbatch,kind,start_ms,end_ms``.
Transfer CSV columns: ``cell,pipeline,microbatch,boundary,direction,bytes,
start_ms,end_ms,latency_ms,pooled_pipelines,wan``.
"""
from __future__ import annotations

import csv
import io
import json

from .timeline import Schedule, ns_to_ms

TASK_FIELDS = ["gpu", "cell", "pipeline", "stage", "microbatch", "kind", "start_ms", "end_ms"]
TRANSFER_FIELDS = ["cell", "pipeline", "microbatch", "boundary", "direction", "bytes",
                   "start_ms", "end_ms", "latency_ms", "pooled_pipelines", "wan"]


def _us(ns: int) -> float:
    return ns / 1000.0


def chrome_trace(s: Schedule) -> list[dict]:
    events = []
    for t in s.tasks:
        events.append({
            "name": t.name if t.microbatch >= 0 else t.kind.value,
            "cat": t.kind.name.lower(),
            "ph": "X",
            "ts": _us(t.start_ns),
            "dur": _us(t.end_ns - t.start_ns),
            "pid": f"cell{t.cell}/pipe{t.pipeline}",
            "tid": t.gpu,
            "args": {"stage": t.stage, "microbatch": t.microbatch},
        })
    for x in s.transfers:
        events.append({
            "name": f"{x.direction.value}{x.microbatch}",
            "cat": "wan" if x.wan else "intra",
            "ph": "X",
            "ts": _us(x.start_ns),
            "dur": _us(x.end_ns - x.start_ns),
            "pid": "net",
            "tid": f"cell{x.cell}/b{x.boundary}/{x.direction.value}",
            "args": {"pipeline": x.pipeline, "bytes": x.nbytes, "pooled": x.pooled_pipelines},
        })
    return events


def chrome_trace_json(s: Schedule) -> str:
    return json.dumps({"traceEvents": chrome_trace(s), "displayTimeUnit": "ms"}, sort_keys=True)


def tasks_csv(s: Schedule) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TASK_FIELDS)
    for t in s.tasks:
        w.writerow([t.gpu, t.cell, t.pipeline, t.stage, t.microbatch, t.kind.value,
                    repr(ns_to_ms(t.start_ns)), repr(ns_to_ms(t.end_ns))])
    return buf.getvalue()


def transfers_csv(s: Schedule) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRANSFER_FIELDS)
    for x in s.transfers:
        w.writerow([x.cell, x.pipeline, x.microbatch, x.boundary, x.direction.value, x.nbytes,
                    repr(ns_to_ms(x.start_ns)), repr(ns_to_ms(x.end_ns)),
                    repr(ns_to_ms(x.latency_ns)), x.pooled_pipelines, int(x.wan)])
    return buf.getvalue()
