import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msrl.encoders import FeatureBank, init_params
from msrl.errors import MSRLError, ValidationError
from msrl.metrics import (
    EvalItem,
    EvalSet,
    MetricsSnapshot,
    accuracy,
    accuracy_from_scores,
    build_eval_set,
    candidate_scores,
    group_accuracy,
    group_accuracy_from_correct,
    group_stats,
    selection_cv,
    snapshot,
    split_catalog,
)
from msrl.relevance import RelevanceMatrixSet
from msrl.rng import stream
from msrl.scheduler import PrioritySet, ScheduleState

from conftest import small_world


def test_single_candidate_is_always_right(world):
    cat = world.catalog
    items = tuple(EvalItem(i, (i,), 0, cat.group_of(i)) for i in range(cat.n_pairs))
    p = init_params(8, 8, stream(0, "p"))
    assert accuracy(p, FeatureBank(cat), EvalSet(cat, items)) == 1.0


def test_random_params_near_chance():
    world = small_world(n_groups=4, pairs_per_group=100, objects_per_image=4)
    cat = world.catalog
    rng = stream(0, "e")
    es = build_eval_set(cat, rng, K=4)
    assert all(len(it.candidates) == 4 for it in es.items)
    acc = accuracy(init_params(8, 8, stream(1, "p")), FeatureBank(cat), es)
    n = len(es.items)
    half_width = 3 * math.sqrt(0.25 * 0.75 / n)
    assert abs(acc - 0.25) < half_width + 0.05


def test_eval_set_candidates():
    world = small_world(n_groups=2, pairs_per_group=12, objects_per_image=3)
    cat = world.catalog
    es = build_eval_set(cat, stream(0, "e"), K=5)
    for it in es.items:
        q = cat.pair(it.query)
        assert it.candidates[it.target] == it.query
        assert len(set(it.candidates)) == len(it.candidates) == 5
        assert all(cat.group_of(c) == it.group for c in it.candidates)
        same = [c for c in it.candidates if cat.pair(c).image_id == q.image_id]
        assert len(same) == 3  # the whole image comes first


def test_exclude_hook():
    world = small_world(n_groups=1, pairs_per_group=12)
    es = build_eval_set(world.catalog, stream(0, "e"), K=12, exclude=lambda q, c: c % 2 == 1)
    for it in es.items:
        assert all(c == it.query or c % 2 == 0 for c in it.candidates)


def test_split_by_image():
    world = small_world(n_groups=3, pairs_per_group=24)
    train, held, ti, ei = split_catalog(world.catalog, stream(0, "s"), 0.25)
    assert train.n_pairs + held.n_pairs == world.catalog.n_pairs
    assert sorted(ti + ei) == list(range(world.catalog.n_pairs))
    assert not {p.image_id for p in train.pairs()} & {p.image_id for p in held.pairs()}
    assert held.group_labels == train.group_labels
    with pytest.raises(ValidationError):
        split_catalog(world.catalog, stream(0, "s"), 1.0)


def test_ties_go_to_lowest_index_and_empty_rejected():
    es = EvalSet(None, (EvalItem(0, (0, 1), 0, 0), EvalItem(1, (0, 1), 1, 0)))
    correct = accuracy_from_scores([np.array([0.5, 0.5]), np.array([0.5, 0.5])], es)
    np.testing.assert_array_equal(correct, [True, False])
    with pytest.raises(ValidationError):
        accuracy_from_scores([np.array([])], EvalSet(None, (EvalItem(0, (), 0, 0),)))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.integers(-64, 64), min_size=1, max_size=6), min_size=1, max_size=8), st.integers(0, 5))
def test_accuracy_invariant_under_increasing_transform(scores, t):
    # scores on a 1/64 grid so the transform stays strictly increasing in floating point
    scores = [[v / 64 for v in s] for s in scores]
    items = tuple(EvalItem(0, tuple(range(len(s))), min(t, len(s) - 1), 0) for s in scores)
    es = EvalSet(None, items)
    base = accuracy_from_scores([np.array(s) for s in scores], es)
    warped = accuracy_from_scores([np.exp(3 * np.array(s)) + 2 for s in scores], es)
    np.testing.assert_array_equal(base, warped)


class TestGroupAccuracy:
    def test_fixtures(self):
        g = group_stats(np.array([1.0, 1.0, 1.0]))
        assert (g.ave, g.std) == (1.0, 0.0)
        g = group_stats(np.array([0.5, 1.0]))
        assert g.ave == 0.75 and g.std == 0.25

    def test_weighted_groups_aggregate_to_overall(self):
        world = small_world(n_groups=3, pairs_per_group=12)
        cat = world.catalog
        es = build_eval_set(cat, stream(0, "e"), K=4)
        p = init_params(8, 8, stream(2, "p"))
        correct = accuracy_from_scores(candidate_scores(p, FeatureBank(cat), es), es)
        ga = group_accuracy_from_correct(correct, es)
        counts = es.group_counts()
        assert np.sum(ga.per_group * counts) / counts.sum() == pytest.approx(correct.mean())
        assert group_accuracy(p, FeatureBank(cat), es).ave == pytest.approx(ga.ave)

    def test_group_without_items_is_nan_and_skipped(self):
        g = group_stats(np.array([np.nan, 0.5, 1.0]))
        assert g.ave == 0.75


class TestSelectionCV:
    def test_fixtures(self):
        assert selection_cv([5, 5, 5]) == (5.0, 0.0)
        assert selection_cv([10, 30]) == (20.0, 50.0)
        with pytest.raises(MSRLError):
            selection_cv([0, 0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=2, max_size=6), st.integers(1, 9))
    def test_scale_free(self, counts, k):
        if sum(counts) == 0:
            return
        assert selection_cv([k * c for c in counts])[1] == pytest.approx(selection_cv(counts)[1])


def make_R_U(selected):
    values = np.array([[[0.1, 0.7, 0.4]], [[0.9, 0.3, 0.2]]])
    mask = np.array([[[True, True, False]], [[False, False, True]]])
    R = RelevanceMatrixSet(values, mask, np.zeros((1, 3), dtype=int))
    U = np.zeros_like(mask)
    for g, j in selected:
        U[g, 0, j] = True
    return R, PrioritySet(U, mask)


class TestSnapshot:
    def test_empty_selection(self):
        R, U = make_R_U([])
        s = snapshot(0, 0.0, R, U, ScheduleState())
        assert math.isnan(s.mean_R_selected) and s.mean_R_all == pytest.approx(1.0 / 3 * (0.1 + 0.7 + 0.2))
        assert (s.lambda1, s.lambda2, s.gamma) == (0.5, 0.5, 0.5)

    def test_selected_mean_within_selected_range(self):
        R, U = make_R_U([(0, 0), (0, 1), (1, 2)])
        s = snapshot(3, 1.5, R, U, ScheduleState())
        assert s.selected_per_group == [2, 1] and s.selected_total == 3
        assert 0.1 <= s.mean_R_selected <= 0.7
        assert s.mean_R_selected == pytest.approx((0.1 + 0.7 + 0.2) / 3)

    def test_counts_must_sum(self):
        with pytest.raises(ValidationError):
            MetricsSnapshot(0, 0.0, 0.5, 0.5, 3, 0.5, 0.5, 0.5, 0.5, [1, 1], [0.5, 0.5])
