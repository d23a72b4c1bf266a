"""Random-instance property suites and a few hypothesis properties."""
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import suites
from brute import optimum
from instances import random_instance, unit_problem

from geopipe.scheduler import CellProblem, cell_makespan_ns, make_schedule
from geopipe.validate import violations


@pytest.mark.parametrize("policy", suites.POLICIES)
def test_random_schedules_are_valid(policy):
    assert suites.policy_suite(policy)["invalid"] == []


@pytest.mark.parametrize("policy", suites.POLICIES)
def test_engine_matches_scheduler_on_random_instances(policy):
    assert suites.policy_suite(policy)["engine_diff"] == []


@pytest.mark.parametrize("policy", suites.POLICIES)
def test_engine_is_deterministic_on_random_instances(policy):
    assert suites.policy_suite(policy)["nondet"] == []


def test_atlas_never_slower_than_varuna():
    bad = suites.dominance()
    assert bad == [], f"{len(bad)} of {suites.N_INSTANCES} instances, first: {bad[:5]}"


def test_atlas_matches_brute_force_optimum():
    checked, diff = suites.brute_force()
    assert checked > 100
    assert diff == [], f"{len(diff)} of {checked} instances differ, first: {diff[:5]}"


def unit(n, S, M, occ, lat, wan, rec=True, bwd=1):
    return CellProblem(n, S, M, (1,) * S, (bwd,) * S, tuple(1 if rec and s < S - 1 else 0 for s in range(S)),
                       occ, lat, wan, 0, True)


@pytest.mark.parametrize("prob,expect", [
    (unit(1, 1, 1, (), (), ()), 2),
    (unit(1, 1, 3, (), (), ()), 6),
    (unit(1, 2, 1, (0,), (0,), (False,)), 4),  # F F B, R+B starts with B
    (unit(2, 2, 1, (2,), (0,), (True,)), 10),
])
def test_brute_force_small_cases(prob, expect):
    assert optimum(prob) == expect


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_brute_force_never_beats_its_own_hint(seed):
    # without a hint the search must find a makespan no worse than ATLAS
    inst = random_instance(random.Random(seed), max_C=2, max_S=2, max_M=2)
    prob = unit_problem(inst)
    assert optimum(prob) <= cell_makespan_ns(prob, "atlas", inst.options)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(suites.POLICIES))
def test_more_microbatches_never_shorten_iteration(seed, policy):
    from dataclasses import replace

    inst = random_instance(random.Random(seed))
    a = make_schedule(inst.plan, inst.model, inst.topo, inst.durations, policy, inst.options)
    bigger = replace(inst.model, num_microbatches=inst.model.num_microbatches + 1)
    b = make_schedule(inst.plan, bigger, inst.topo, inst.durations, policy, inst.options)
    assert violations(b) == []
    assert b.makespan_ns >= a.makespan_ns


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(suites.POLICIES))
def test_compute_lower_bound(seed, policy):
    inst = random_instance(random.Random(seed))
    s = make_schedule(inst.plan, inst.model, inst.topo, inst.durations, policy, inst.options)
    d = inst.durations
    M = inst.model.num_microbatches
    # the first stage alone runs M forwards and M backwards
    assert s.makespan_ms >= M * (d.fwd_ms + d.bwd_ms) - 1e-9
