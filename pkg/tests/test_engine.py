from dataclasses import replace

import pytest

from geopipe.engine import Event, EventKind, execute, iteration_time, run, slowdown
from geopipe.errors import Deadlock
from geopipe.export import chrome_trace_json, tasks_csv, transfers_csv
from geopipe.scenarios import slot_fixture, twelve_gpu_fixture
from geopipe.scheduler import append_allreduce, make_schedule
from geopipe.timeline import TaskKind
from geopipe.topology import ClusterTopology, Datacenter, WanProfile
from geopipe.validate import violations
from geopipe.workload import Durations, ModelSpec, build_plan, resolve_compute

POLICIES = ["gpipe", "onef1b", "varuna", "atlas"]


def key(s):
    return sorted((t.gpu, t.kind.value, t.microbatch, t.stage, t.start_ns, t.end_ns) for t in s.tasks)


@pytest.mark.parametrize("policy", POLICIES)
@pytest.mark.parametrize("make", [slot_fixture, twelve_gpu_fixture])
def test_engine_reproduces_schedule(policy, make):
    fx = make()
    d = resolve_compute(fx.compute, fx.model, fx.topo)
    planned = append_allreduce(make_schedule(fx.plan, fx.model, fx.topo, d, policy), fx.plan, fx.model, fx.topo)
    got = execute(planned)
    assert key(got) == key(planned)
    assert got.makespan_ns == planned.makespan_ns
    assert violations(got) == []


def test_slot_fixture_through_engine():
    fx = slot_fixture()
    d = resolve_compute(fx.compute, fx.model, fx.topo)
    assert iteration_time(run(fx.plan, "varuna", fx.model, fx.topo, d)) == 38.0
    assert iteration_time(run(fx.plan, "atlas", fx.model, fx.topo, d)) == 36.0


def test_zero_comm_critical_path():
    topo = ClusterTopology((Datacenter("dc1", 3, 1e15),), WanProfile({}, 1.0))
    model = ModelSpec(num_layers=3, hidden=8, seq_len=1, num_microbatches=1)
    plan = build_plan(topo, model, 1, 1)
    t = run(plan, "gpipe", model, topo, Durations(1, 2, 1))
    # F F F, B on the last stage, then R+B on the two others
    assert t.makespan_ms == pytest.approx(3 + 2 + 3 + 3)


def test_slowdown_of_itself_is_one():
    fx = slot_fixture()
    d = resolve_compute(fx.compute, fx.model, fx.topo)
    t = run(fx.plan, "atlas", fx.model, fx.topo, d)
    assert slowdown(t, t) == 1.0


def test_repeat_runs_are_byte_identical():
    fx = twelve_gpu_fixture()
    d = resolve_compute(fx.compute, fx.model, fx.topo)
    outs = []
    for _ in range(2):
        t = run(fx.plan, "atlas", fx.model, fx.topo, d, allreduce=True)
        outs.append((chrome_trace_json(t), tasks_csv(t), transfers_csv(t)))
    assert outs[0] == outs[1]


def test_deadlock_reports_cycle():
    fx = slot_fixture()
    d = resolve_compute(fx.compute, fx.model, fx.topo)
    s = make_schedule(fx.plan, fx.model, fx.topo, d, "gpipe")
    last = fx.plan.num_stages - 1
    # move a last-stage backward ahead of its own forward in the GPU's queue
    tasks = []
    for t in s.tasks:
        if t.kind is TaskKind.BACKWARD and t.stage == last and t.microbatch == 0 and t.pipeline == 0:
            t = replace(t, start_ns=0, end_ns=1)
        tasks.append(t)
    with pytest.raises(Deadlock) as e:
        execute(replace(s, tasks=tasks))
    assert e.value.cycle


def test_event_order_is_total():
    a = Event(5, EventKind.TASK_DONE, 0, 0, 1, 0, 0)
    b = Event(5, EventKind.TRANSFER_DONE, 0, 0, 0, 0, 1)
    c = Event(4, EventKind.TASK_READY, 9, 9, 9, 9, 2)
    assert sorted([b, a, c]) == [c, a, b]


@pytest.mark.parametrize("latency", [0.0, 40.0])
def test_atlas_wan_is_work_conserving(latency):
    # a pooled send leaves the instant its producer finishes, so the link
    # never idles while a finished activation or gradient waits for it
    fx = twelve_gpu_fixture(latency_ms=latency)
    d = resolve_compute(fx.compute, fx.model, fx.topo)
    s = execute(make_schedule(fx.plan, fx.model, fx.topo, d, "atlas"))
    ends = {}
    for t in s.tasks:
        if t.kind in (TaskKind.FORWARD, TaskKind.BACKWARD):
            ends[(t.pipeline, t.stage, t.kind, t.microbatch)] = t.end_ns
    wan = [x for x in s.transfers if x.wan]
    assert wan
    for x in wan:
        kind = TaskKind.FORWARD if x.direction.value == "act" else TaskKind.BACKWARD
        assert x.start_ns == ends[(x.pipeline, x.src_stage, kind, x.microbatch)]
