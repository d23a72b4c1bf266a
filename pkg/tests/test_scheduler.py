import pytest

from geopipe.errors import InsufficientGpus
from geopipe.scenarios import GPT_A, GPT_B, slot_fixture
from geopipe.scenarios import twelve_gpu_fixture
from geopipe.scheduler import (ScheduleOptions, append_allreduce, earliest_gap, make_schedule,
                               stage_allreduce_ms)
from geopipe.timeline import Direction, TaskKind
from geopipe.topology import ClusterTopology, Datacenter, WanProfile, uniform_topology
from geopipe.validate import peak_inflight, violations
from geopipe.workload import Durations, ModelSpec, build_plan, resolve_compute

POLICIES = ["gpipe", "onef1b", "varuna", "atlas"]


def one_dc(S, M, C=1):
    # an idealised fabric: stage hand-offs take no time
    topo = ClusterTopology((Datacenter("dc1", S * C, 1e15),), WanProfile({}, 1.0))
    model = ModelSpec(num_layers=S, hidden=8, seq_len=1, num_microbatches=M)
    return topo, model, build_plan(topo, model, 1, C)


def run(policy, topo, model, plan, dur, **opts):
    return make_schedule(plan, model, topo, dur, policy, ScheduleOptions(**opts))


@pytest.mark.parametrize("policy", POLICIES)
def test_single_stage_is_forward_plus_backward(policy):
    # the last stage never recomputes: its forward output is consumed at once
    topo, model, plan = one_dc(1, 1)
    s = run(policy, topo, model, plan, Durations(1, 2, 1))
    assert s.makespan_ms == pytest.approx(3.0, abs=1e-6)


def test_gpipe_two_stage_hand_trace():
    # Stage 1 owns 6 units of work (F, F, B, B) and cannot start before t=1,
    # so it ends no earlier than 7; stage 0 then still runs a 2-unit backward.
    topo, model, plan = one_dc(2, 2)
    s = run("gpipe", topo, model, plan, Durations(1, 2, 1), recompute=False)
    assert s.makespan_ms == pytest.approx(9.0, abs=1e-6)
    assert not violations(s)


def test_onef1b_single_stage_matches_gpipe():
    topo, model, plan = one_dc(1, 4)
    d = Durations(1, 2, 1)
    assert run("onef1b", topo, model, plan, d).makespan_ns == run("gpipe", topo, model, plan, d).makespan_ns


def test_onef1b_caps_inflight_activations():
    topo, model, plan = one_dc(2, 4)
    d = Durations(1, 2, 1)
    peaks_1f1b = peak_inflight(run("onef1b", topo, model, plan, d, recompute=False))
    peaks_gpipe = peak_inflight(run("gpipe", topo, model, plan, d, recompute=False))
    assert peaks_1f1b[0, 0] == 2
    assert peaks_gpipe[0, 0] == 4


def test_slot_fixture_makespans():
    fx = slot_fixture()
    d = resolve_compute(fx.compute, fx.model, fx.topo)
    got = {p: make_schedule(fx.plan, fx.model, fx.topo, d, p).makespan_ms for p in POLICIES}
    assert got["varuna"] == 38.0
    assert got["atlas"] == 36.0


@pytest.mark.parametrize("policy", POLICIES)
def test_fixtures_valid(policy):
    for fx in (slot_fixture(), twelve_gpu_fixture()):
        d = resolve_compute(fx.compute, fx.model, fx.topo)
        assert violations(make_schedule(fx.plan, fx.model, fx.topo, d, policy)) == []


def test_testbed_policy_ordering():
    fx = twelve_gpu_fixture()
    d = resolve_compute(fx.compute, fx.model, fx.topo)
    span = lambda p, **o: make_schedule(fx.plan, fx.model, fx.topo, d, p, ScheduleOptions(**o)).makespan_ns
    assert span("gpipe") >= span("varuna") >= span("atlas")
    assert span("gpipe", multi_conn=False) > span("gpipe")


def test_first_wan_transfer_single_connection():
    topo = uniform_topology([2, 2, 2], latency_ms=40)
    model = ModelSpec(num_layers=6, num_microbatches=1, **GPT_B)
    plan = build_plan(topo, model, 1, 1)
    s = make_schedule(plan, model, topo, Durations(10, 20, 10), "gpipe", ScheduleOptions(multi_conn=False))
    first = min((x for x in s.transfers if x.wan), key=lambda x: x.start_ns)
    assert first.direction is Direction.ACTIVATION
    assert 2125 <= first.end_ms - first.start_ms <= 2875


@pytest.mark.parametrize("S,M", [(1, 1), (2, 2), (3, 3), (4, 2), (4, 4), (6, 4)])
def test_atlas_single_pipeline_single_dc_no_worse_than_varuna(S, M):
    # nothing crosses a WAN, so pooling has no effect; the remaining
    # difference is rule order (forward before recompute), never a loss
    topo, model, plan = one_dc(S, M)
    d = Durations(1, 2, 1)
    a = run("atlas", topo, model, plan, d)
    assert not any(x.wan for x in a.transfers)
    assert a.makespan_ns <= run("varuna", topo, model, plan, d).makespan_ns


def test_atlas_memory_cap_binds_beyond_s_microbatches():
    # with M > S the default cap of S in-flight activations makes ATLAS wait
    topo, model, plan = one_dc(4, 6)
    d = Durations(1, 2, 1)
    capped = run("atlas", topo, model, plan, d)
    assert max(peak_inflight(capped).values()) <= 4
    assert max(peak_inflight(run("varuna", topo, model, plan, d)).values()) > 4


def test_atlas_rules_hold_on_fixture():
    fx = slot_fixture()
    d = resolve_compute(fx.compute, fx.model, fx.topo)
    s = make_schedule(fx.plan, fx.model, fx.topo, d, "atlas")
    by_key = {(t.pipeline, t.stage, t.kind, t.microbatch): t for t in s.tasks}
    for x in s.transfers:
        if x.wan:
            kind = TaskKind.FORWARD if x.direction is Direction.ACTIVATION else TaskKind.BACKWARD
            assert by_key[x.pipeline, x.src_stage, kind, x.microbatch].end_ns == x.start_ns
    assert max(peak_inflight(s).values()) <= fx.plan.num_stages


def test_mem_limit_validated():
    topo, model, plan = one_dc(2, 2)
    with pytest.raises(ValueError):
        run("atlas", topo, model, plan, Durations(1, 2, 1), mem_limit=0)


def test_mem_limit_respected():
    topo, model, plan = one_dc(3, 6)
    s = run("varuna", topo, model, plan, Durations(1, 2, 1), mem_limit=2)
    assert max(peak_inflight(s).values()) <= 2


def test_earliest_gap():
    iv = [(2, 4), (6, 9)]
    assert earliest_gap(iv, 0, 0, 2) == 0
    assert earliest_gap(iv, 0, 1, 2) == 3  # [1,3) hits (2,4); [4,6) is free
    assert earliest_gap(iv, 3, 0, 2) == 4
    assert earliest_gap(iv, 0, 0, 3) == 9


def test_allreduce_marker_for_single_replica():
    topo, model, plan = one_dc(2, 2)
    s = append_allreduce(run("gpipe", topo, model, plan, Durations(1, 2, 1)), plan, model, topo)
    ar = [t for t in s.tasks if t.kind is TaskKind.ALLREDUCE]
    assert len(ar) == 2 and all(t.duration_ns == 0 for t in ar)


def test_allreduce_closed_form_per_stage():
    topo = uniform_topology([6])
    model = ModelSpec(num_layers=1, hidden=8, seq_len=1, params_per_layer=1e9)
    plan = build_plan(topo, model, 6, 1)
    assert stage_allreduce_ms(plan, model, topo) == [pytest.approx(266.67, abs=0.01)]


def test_allreduce_waits_for_slowest_replica():
    topo = uniform_topology([8])
    model = ModelSpec(num_layers=2, num_microbatches=2, **GPT_A)
    plan = build_plan(topo, model, 2, 2)
    base = run("varuna", topo, model, plan, Durations(1, 2, 1))
    s = append_allreduce(base, plan, model, topo)
    for t in s.tasks:
        if t.kind is TaskKind.ALLREDUCE:
            last_b = max(x.end_ns for x in base.tasks if x.stage == t.stage and x.kind is TaskKind.BACKWARD)
            assert t.start_ns == last_b and t.duration_ns > 0
    assert violations(s) == []


def test_infeasible_plan_raises():
    with pytest.raises(InsufficientGpus):
        build_plan(uniform_topology([3]), ModelSpec(num_layers=4, hidden=8, seq_len=1), 1, 1)


def test_policy_alias():
    topo, model, plan = one_dc(2, 3)
    d = Durations(1, 2, 1)
    assert run("1f1b", topo, model, plan, d).policy == "onef1b"
    with pytest.raises(ValueError):
        run("pipedream", topo, model, plan, d)
