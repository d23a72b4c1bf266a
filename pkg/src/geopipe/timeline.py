"""Schedule records shared by the scheduler, the engine and the exporters."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

NS_PER_MS = 1_000_000


def ms_to_ns(ms: float) -> int:
    return int(round(ms * NS_PER_MS))


def ns_to_ms(ns: int) -> float:
    return ns / NS_PER_MS


class TaskKind(str, Enum):
    FORWARD = "F"
    BACKWARD = "B"
    RECOMPUTE = "R"
    ALLREDUCE = "AR"
    PREFILL = "P"


class Direction(str, Enum):
    ACTIVATION = "act"  # stage k -> k+1
    GRADIENT = "grad"  # stage k+1 -> k


@dataclass(frozen=True)
class ScheduledTask:
    gpu: str
    pipeline: int  # global index: cell * C + rank
    cell: int
    kind: TaskKind
    microbatch: int
    stage: int
    start_ns: int
    end_ns: int

    @property
    def start_ms(self) -> float:
        return ns_to_ms(self.start_ns)

    @property
    def end_ms(self) -> float:
        return ns_to_ms(self.end_ns)

    @property
    def duration_ns(self) -> int:
        return self.end_ns - self.start_ns

    @property
    def name(self) -> str:
        return f"{self.kind.value}{self.microbatch}"


@dataclass(frozen=True)
class ScheduledTransfer:
    """One activation or gradient message across boundary ``boundary`` (stage k <-> k+1).

    The sending link is busy for ``[start, start + busy)``; the message lands
    at ``end = start + busy + latency``.
    """

    cell: int
    pipeline: int
    microbatch: int
    boundary: int
    direction: Direction
    nbytes: int
    start_ns: int
    end_ns: int
    latency_ns: int
    pooled_pipelines: int = 1
    wan: bool = False

    @property
    def busy_end_ns(self) -> int:
        return self.end_ns - self.latency_ns

    @property
    def start_ms(self) -> float:
        return ns_to_ms(self.start_ns)

    @property
    def end_ms(self) -> float:
        return ns_to_ms(self.end_ns)

    @property
    def src_stage(self) -> int:
        return self.boundary if self.direction is Direction.ACTIVATION else self.boundary + 1

    @property
    def dst_stage(self) -> int:
        return self.boundary + 1 if self.direction is Direction.ACTIVATION else self.boundary


@dataclass
class Schedule:
    tasks: list[ScheduledTask]
    transfers: list[ScheduledTransfer]
    policy: str
    num_stages: int = 0
    num_microbatches: int = 0
    mem_limit: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def makespan_ns(self) -> int:
        ends = [t.end_ns for t in self.tasks] + [x.end_ns for x in self.transfers]
        return max(ends, default=0)

    @property
    def makespan_ms(self) -> float:
        return ns_to_ms(self.makespan_ns)

    def gpus(self) -> list[str]:
        return sorted({t.gpu for t in self.tasks})

    def by_gpu(self) -> dict[str, list[ScheduledTask]]:
        out: dict[str, list[ScheduledTask]] = {}
        for t in sorted(self.tasks, key=lambda t: (t.start_ns, t.end_ns)):
            out.setdefault(t.gpu, []).append(t)
        return out


# The engine produces the same structure; the name documents intent.
Timeline = Schedule
