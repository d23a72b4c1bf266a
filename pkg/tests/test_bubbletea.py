import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geopipe import bubbletea as bt
from geopipe.comm import TensorShape
from geopipe.scenarios import slot_fixture, twelve_gpu_fixture
from geopipe.scheduler import append_allreduce, make_schedule
from geopipe.timeline import Schedule, ScheduledTask, TaskKind
from geopipe.workload import build_plan, resolve_compute

MS = 1_000_000


def fixture_timeline(fx, policy="atlas"):
    d = resolve_compute(fx.compute, fx.model, fx.topo)
    s = make_schedule(fx.plan, fx.model, fx.topo, d, policy)
    return append_allreduce(s, fx.plan, fx.model, fx.topo)


@pytest.fixture(scope="module")
def testbed():
    fx = twelve_gpu_fixture()
    return fx, fixture_timeline(fx)


def one_gpu(*busy):
    tasks = [ScheduledTask("dc1:0", 0, 0, TaskKind.FORWARD, i, 0, a * MS, b * MS)
             for i, (a, b) in enumerate(busy)]
    return Schedule(tasks, [], "atlas", 1, len(busy))


def test_prefill_duration_is_linear_up_to_8k():
    assert bt.prefill_duration(8192) == pytest.approx(300.0)
    assert bt.prefill_duration(4096) == pytest.approx(150.0)
    with pytest.raises(ValueError):
        bt.prefill_duration(8193)
    with pytest.raises(ValueError):
        bt.prefill_duration(0)


def test_prefill_duration_accepts_a_curve():
    assert bt.prefill_duration(100, curve=lambda n: 7.0) == 7.0


def test_pp_overhead_anchor_and_scaling():
    shape = TensorShape(1, 8192, 4096)
    assert bt.prefill_pp_overhead(shape, 32) == pytest.approx(86.0, abs=2.0)
    assert bt.prefill_pp_overhead(shape, 16) == pytest.approx(bt.prefill_pp_overhead(shape, 32) / 2)
    assert bt.prefill_pp_overhead(shape, 0) == 0.0
    with pytest.raises(ValueError):
        bt.prefill_pp_overhead(shape, -1)


def test_request_validation():
    with pytest.raises(ValueError):
        bt.PrefillRequest("x", 0.0, 9000)


def test_memory_budget_is_enforced():
    with pytest.raises(ValueError):
        bt.PrefillPipeline(("dc1:0",), "dc1", memory_bytes=2 * bt.GIB)
    with pytest.raises(ValueError):
        bt.PrefillPipeline(("dc1:0", "dc2:0"), "dc1")
    with pytest.raises(ValueError):
        bt.PrefillPipeline((), "dc1")


def test_prefill_pipelines_follow_stage_and_rank(testbed):
    fx, _ = testbed
    pls = bt.prefill_pipelines(fx.plan)
    assert len(pls) == fx.plan.num_stages * fx.plan.C
    for pl in pls:
        assert all(g.startswith(pl.dc_id + ":") for g in pl.gpus)
    gpus = [g for pl in pls for g in pl.gpus]
    assert len(gpus) == len(set(gpus)) == 12


def test_fully_busy_gpu_has_no_bubbles():
    t = one_gpu((0, 5), (5, 10))
    assert bt.extract_bubbles(t) == {"dc1:0": []}
    assert bt.utilization(t) == 1.0


def test_bubbles_are_the_gaps():
    t = one_gpu((2, 4), (6, 9))
    got = [(b.start_ns // MS, b.end_ns // MS) for b in bt.extract_bubbles(t, horizon_ms=12)["dc1:0"]]
    assert got == [(0, 2), (4, 6), (9, 12)]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 50), st.integers(1, 10)), min_size=1, max_size=8))
def test_bubbles_plus_busy_cover_the_horizon(spans):
    cur, busy = 0, []
    for gap, dur in spans:
        busy.append((cur + gap, cur + gap + dur))
        cur += gap + dur
    t = one_gpu(*busy)
    horizon = cur + 3
    idle = sum(b.end_ns - b.start_ns for b in bt.extract_bubbles(t, horizon)["dc1:0"])
    work = sum(b - a for a, b in busy) * MS
    assert idle + work == horizon * MS
    assert bt.utilization(t, horizon) == pytest.approx(work / (horizon * MS))


def test_atlas_consolidates_interior_bubbles():
    fx = slot_fixture()
    d = resolve_compute(fx.compute, fx.model, fx.topo)
    M, C = fx.model.num_microbatches, fx.plan.C

    def interior(policy):
        s = make_schedule(fx.plan, fx.model, fx.topo, d, policy)
        by = s.by_gpu()
        out = {}
        for g, bs in bt.extract_bubbles(s).items():
            first, last = by[g][0].start_ns, by[g][-1].end_ns
            out[g] = [b for b in bs if b.start_ns >= first and b.end_ns <= last]
        return out

    a, v = interior("atlas"), interior("varuna")
    middle = [g for g in a if g.startswith("dc2:")]
    for g in middle:
        assert len(a[g]) <= math.ceil(M / C)
        assert len(a[g]) < len(v[g])
        assert max(b.length_ms for b in a[g]) > max(b.length_ms for b in v[g])


def test_empty_request_stream_changes_nothing(testbed):
    fx, t = testbed
    res = bt.schedule_prefills(t, [], bt.prefill_pipelines(fx.plan))
    assert res.timeline.tasks == sorted(t.tasks, key=lambda x: (x.start_ns, x.kind is TaskKind.PREFILL,
                                                                x.cell, x.pipeline, x.stage, x.microbatch))
    assert bt.utilization(res.timeline) == bt.utilization(t)
    assert res.accepted == [] and res.rejected == []


def test_request_longer_than_any_bubble_is_rejected():
    t = one_gpu((0, 10), (110, 120))  # a single 100 ms bubble
    pl = [bt.PrefillPipeline(("dc1:0",), "dc1")]
    res = bt.schedule_prefills(t, [bt.PrefillRequest("big", 0.0, 8192)], pl)
    assert res.accepted == []
    assert res.rejected[0][1] == bt.NO_CAPACITY
    assert res.timeline.tasks == t.tasks


def test_request_fits_the_first_bubble_it_can():
    t = one_gpu((0, 10), (110, 120))
    pl = [bt.PrefillPipeline(("dc1:0",), "dc1")]
    res = bt.schedule_prefills(t, [bt.PrefillRequest("a", 5.0, 2048)], pl)  # 75 ms
    (p,) = res.accepted
    assert p.start_ms == 10.0 and p.finish_ms == 85.0
    assert bt.ttft_overhead_ms(p) == pytest.approx(5.0)


def test_guard_gap_before_next_training_task():
    t = one_gpu((0, 10), (110, 120))
    pl = [bt.PrefillPipeline(("dc1:0",), "dc1")]
    req = [bt.PrefillRequest("a", 0.0, int(8192 * 95 / 300))]  # ~95 ms
    assert len(bt.schedule_prefills(t, req, pl).accepted) == 1
    res = bt.schedule_prefills(t, req, pl, guard_ms=10.0)
    assert res.accepted == []


@pytest.fixture(scope="module")
def saturated(testbed):
    fx, t = testbed
    reqs = bt.synthetic_requests(2000, t.makespan_ms, seed=0)
    return fx, t, reqs, bt.schedule_prefills(t, reqs, bt.prefill_pipelines(fx.plan), hidden=fx.model.hidden)


def test_training_tasks_do_not_move(saturated):
    _, t, _, res = saturated
    assert sorted(bt.training_tasks(res.timeline), key=repr) == sorted(t.tasks, key=repr)
    assert res.timeline.transfers == t.transfers


def test_prefills_sit_inside_bubbles(saturated):
    _, t, _, res = saturated
    by = {g: [(x.start_ns, x.end_ns) for x in ts] for g, ts in res.timeline.by_gpu().items()}
    for g, spans in by.items():
        for (a0, b0), (a1, b1) in zip(spans, spans[1:]):
            assert b0 <= a1, g  # nothing overlaps on a GPU
    horizon = t.makespan_ns
    for p in res.accepted:
        for _, s, e in p.intervals:
            assert 0 <= s < e <= horizon


def test_prefill_stages_are_causal(saturated):
    fx, _, _, res = saturated
    for p in res.accepted:
        assert p.intervals[0][1] >= round(p.request.arrival_ms * MS)
        for (_, _, e0), (_, s1, _) in zip(p.intervals, p.intervals[1:]):
            assert s1 >= e0
        assert bt.ttft_overhead_ms(p) >= -1e-6


def test_saturating_stream_fills_most_bubbles(saturated):
    _, t, _, res = saturated
    before, after = bt.utilization(t), bt.utilization(res.timeline)
    assert before < 0.5
    assert after >= 0.95
    assert len(res.accepted) + len(res.rejected) == 2000


def test_placement_is_deterministic(saturated):
    fx, t, reqs, res = saturated
    again = bt.schedule_prefills(t, reqs, bt.prefill_pipelines(fx.plan), hidden=fx.model.hidden)
    assert bt.results_csv(again) == bt.results_csv(res)


def test_fcfs_order():
    t = one_gpu((0, 10), (110, 120))
    pl = [bt.PrefillPipeline(("dc1:0",), "dc1")]
    reqs = [bt.PrefillRequest("late", 2.0, 2048), bt.PrefillRequest("early", 1.0, 2048)]
    res = bt.schedule_prefills(t, reqs, pl)
    assert [p.request.id for p in res.accepted] == ["early"]
    assert [r.id for r, _ in res.rejected] == ["late"]


def test_request_csv_round_trip():
    reqs = bt.synthetic_requests(20, 100.0, seed=3)
    text = "id,arrival_ms,tokens\n" + "".join(f"{r.id},{r.arrival_ms!r},{r.tokens}\n" for r in reqs)
    assert bt.read_requests(text) == reqs
    with pytest.raises(ValueError):
        bt.read_requests("a,1\n")


def test_results_csv_columns(saturated):
    *_, res = saturated
    lines = bt.results_csv(res).splitlines()
    assert lines[0] == "id,accepted,pipeline,start_ms,ttft_overhead_ms,reason"
    assert len(lines) == 2001
    assert any(l.endswith(bt.NO_CAPACITY) for l in lines) == bool(res.rejected)
