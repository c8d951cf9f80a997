from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remapsim.errors import TargetLost
from remapsim.identify import (IdentificationState, LiveSource, ScriptedSource, accumulate,
                               convergence_iteration, identify, likely_candidates,
                               probabilities, ranking_stable, refine, step, top_set,
                               top_set_from)
from remapsim.guest import GuestVm
from remapsim.scenario import from_dict

from conftest import tiny_raw

R1, X1 = [4, 8, 15, 16, 23, 42], [3, 8, 12, 15, 16, 23, 27]
R2, X2 = [6, 8, 15, 16, 23, 42], [2, 8, 12, 13, 15, 23]


def test_worked_example_sets():
    ref1 = refine(None, R1)
    c1 = likely_candidates(ref1, X1)
    assert c1 == {4, 42}
    acc1 = accumulate({}, c1, ref1)
    ref2 = refine(ref1, R2)
    assert ref2 == {8, 15, 16, 23, 42}
    c2 = likely_candidates(ref2, X2)
    assert c2 == {16, 42}
    acc2 = accumulate(acc1, c2, ref2)
    assert acc2 == {16: 1, 42: 2}
    ranked = probabilities(acc2)
    assert [(e.gpa, e.probability) for e in ranked] == [(42, Fraction(2, 3)), (16, Fraction(1, 3))]


def test_worked_example_state():
    src = ScriptedSource([(R1, X1), (R2, X2)])
    st0 = IdentificationState.empty(src.guest_pages)
    st1, rec1 = step(st0, src)
    st2, rec2 = step(st1, src)
    assert st1.candidates() == {4: 1, 42: 1}
    assert st2.refined_set() == {8, 15, 16, 23, 42}
    assert st2.candidates() == {16: 1, 42: 2}
    assert [(e.gpa, e.probability) for e in st2.ranking()] == [
        (42, Fraction(2, 3)), (16, Fraction(1, 3))]
    assert st2.top1() == 42
    assert rec2.refined_size == 5 and rec2.candidate_cardinality == 3
    # the update is functional
    assert st1.candidates() == {4: 1, 42: 1}


def test_worked_example_top_set():
    src = ScriptedSource([(R1, X1), (R2, X2)])
    state = IdentificationState.empty(src.guest_pages)
    for _ in range(2):
        state, rec = step(state, src, tp=42)
    assert rec.top_size == 1
    assert top_set(state, None, 16).elements == {16, 42}
    assert top_set(state, state.ranking(), 16).elements == {16, 42}
    # a page in R^2 that never was a candidate: everything in R^2 ties with it
    assert state.top_set_size(8) == 5


def test_target_lost():
    src = ScriptedSource([(R1, X1), (R2, X2)])
    state = IdentificationState.empty(src.guest_pages)
    state, _ = step(state, src)
    state, _ = step(state, src)
    with pytest.raises(TargetLost):
        state.top_set_size(4)
    with pytest.raises(TargetLost):
        top_set_from(state.refined_set(), state.ranking(), 4)


def test_no_candidates_means_empty_ranking():
    src = ScriptedSource([([1, 2], [1, 2])])
    state, _ = step(IdentificationState.empty(3), src)
    assert state.ranking() == [] and state.top1() is None
    assert probabilities({}) == []


def test_ties_go_to_latest_first_touch():
    # 5 and 9 both candidates once; 9 is touched later in R
    src = ScriptedSource([([1, 5, 9], [1])])
    state, _ = step(IdentificationState.empty(10), src)
    assert [e.gpa for e in state.ranking()] == [9, 5]
    assert state.top1() == 9
    assert state.top_k(1) == (9,)
    src = ScriptedSource([([1, 9, 5], [1])])
    state, _ = step(IdentificationState.empty(10), src)
    assert state.top1() == 5


def test_convergence_helpers():
    assert convergence_iteration([50, 9, 5, 3]) == 3
    assert convergence_iteration([50, 9], threshold=10) == 2
    assert convergence_iteration([50, 9]) is None
    assert ranking_stable([(1,), (2,), (2,), (2,)], patience=2)
    assert not ranking_stable([(1,), (2,), (2,)], patience=2)
    assert not ranking_stable([(), (), ()], patience=2)


page_lists = st.lists(st.integers(0, 40), unique=True, max_size=30)


@given(st.lists(st.tuples(page_lists, page_lists), min_size=1, max_size=8))
@settings(max_examples=200, deadline=None)
def test_state_properties(pairs):
    src = ScriptedSource(pairs, guest_pages=41)
    state = IdentificationState.empty(41)
    prev_refined = None
    for _ in pairs:
        state, rec = step(state, src)
        ref = state.refined_set()
        if prev_refined is not None:
            assert ref <= prev_refined
        prev_refined = ref
        cands = state.candidates()
        assert set(cands) <= ref
        assert all(m <= state.iteration for m in cands.values())
        ranked = state.ranking()
        if ranked:
            assert sum(e.probability for e in ranked) == 1
            probs = [e.probability for e in ranked]
            assert probs == sorted(probs, reverse=True)
            assert ranked[0].gpa == state.top1()


def _tiny_vm(level, seed, meta=0):
    return GuestVm(from_dict(tiny_raw(level=level, meta=meta, volatile_pool=40,
                                      volatile_draw=0.1)), seed=seed)


def test_noise_free_identifies_immediately():
    vm = _tiny_vm(0.0, 1)
    tp = vm.resources["index"].gpas[0]
    run = identify(LiveSource(vm, "web"), "index", "about", 10, tp=tp)
    assert run.converged_at in (1, 2)
    assert run.records[-1].top_size == 1
    assert run.state.top1() == tp


def test_live_identification_under_noise():
    vm = _tiny_vm(8.0, 2)
    tp = vm.resources["index"].gpas[0]
    run = identify(LiveSource(vm, "web", keep=True), "index", "about", 40, tp=tp)
    assert run.converged_at is not None
    assert run.state.top1() == tp
    assert len(run.records) == 40


def test_attacker_mode_stops_on_stable_ranking():
    vm = _tiny_vm(8.0, 3)
    run = identify(LiveSource(vm, "web"), "index", "about", 60, patience=4,
                   stop_when_converged=True)
    assert run.converged_at is not None and len(run.records) == run.converged_at
    assert run.state.top1() == vm.resources["index"].gpas[0]


def test_r_recordings_contain_resource_pages():
    vm = _tiny_vm(30.0, 4, meta=1)
    res = vm.resources["index"]
    src = LiveSource(vm, "web", keep=True)
    state = IdentificationState.empty(vm.table.guest_pages)
    for _ in range(20):
        state, _ = step(state, src, "index", "about")
        assert set(res.gpas + res.meta_gpas) <= state.refined_set()
    assert all(set(res.gpas) <= r.as_set for r, _ in src.history)


def test_ranking_limit():
    src = ScriptedSource([([1, 2, 3, 4], [])])
    state, _ = step(IdentificationState.empty(5), src)
    assert len(state.ranking(limit=2)) == 2
    assert state.support_size == 4 and state.candidate_cardinality == 4
