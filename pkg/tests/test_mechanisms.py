"""Tests for the paired mechanism, its variants, and the payoff evaluators."""

import itertools

import numpy as np
import pytest

from pairedsd.market import (
    MarketSpec,
    PreferenceProfile,
    TieBreakDraw,
    order_for_courses,
    order_for_dorms,
    run_sd,
)
from pairedsd.mechanisms import (
    counterfactual_payoffs_exact,
    counterfactual_payoffs_frozen,
    exact_market_assignments,
    expected_payoffs,
    expected_payoffs_exact,
    frozen_payoff_matrix,
    heuristic_signals,
    run_independent_rsd,
    run_paired_sd,
)
from pairedsd.market import GuardError
from pairedsd.rng import stream
from pairedsd.scenarios import motivating_example, section5_scenario

IDENTITY_TB = TieBreakDraw(r_c=np.array([0, 1]), r_d=np.array([0, 1]))


def _all_tiebreaks(n):
    perms = [np.array(p) for p in itertools.permutations(range(n))]
    return [TieBreakDraw(r_c=rc, r_d=rd) for rc in perms for rd in perms]


def _random_instance(seed, n=9, c=5, d=3, k=2, num_signals=3):
    rng = np.random.default_rng(seed)
    caps_c = rng.integers(1, 4, c)
    caps_d = rng.integers(1, 4, d)
    while caps_d.sum() < n:
        caps_d[rng.integers(0, d)] += 1
    spec = MarketSpec(
        course_capacities=tuple(int(x) for x in caps_c),
        dorm_capacities=tuple(int(x) for x in caps_d),
        bundle_size=k,
        num_students=n,
    )
    prefs = PreferenceProfile(
        course_values=rng.uniform(0.1, 5.0, (n, c)), dorm_values=rng.uniform(0.1, 5.0, (n, d))
    )
    signals = rng.integers(0, num_signals, n)
    tiebreak = TieBreakDraw(r_c=rng.permutation(n), r_d=rng.permutation(n))
    return spec, prefs, signals, tiebreak


# ---------------------------------------------------------------------------
# Motivating-example fixtures
# ---------------------------------------------------------------------------


def test_paired_sd_truthful_profile_gives_10_10():
    spec, prefs = motivating_example()
    allocation, _, _ = run_paired_sd(np.array([1, 0]), IDENTITY_TB, spec, prefs)
    assert prefs.utilities(allocation).tolist() == [10.0, 10.0]
    assert allocation.courses[0].tolist() == [1]
    assert allocation.dorms[0] == 0


def test_paired_sd_reversed_profile_gives_1_1():
    spec, prefs = motivating_example()
    allocation, _, _ = run_paired_sd(np.array([0, 1]), IDENTITY_TB, spec, prefs)
    assert prefs.utilities(allocation).tolist() == [1.0, 1.0]


def test_irsd_chris_first_in_both_markets():
    spec, prefs = motivating_example()
    # rank 1 picks first: student 0 first in both markets
    tb = TieBreakDraw(r_c=np.array([1, 0]), r_d=np.array([1, 0]))
    allocation = run_independent_rsd(tb, spec, prefs)
    assert prefs.utilities(allocation).tolist() == [11.0, 0.0]


def test_irsd_expected_utility_over_four_orders():
    spec, prefs = motivating_example()
    means = expected_payoffs_exact(np.zeros(2, dtype=int), spec, prefs)
    assert means.tolist() == [5.5, 5.5]


def test_single_student_gets_favorite_bundle():
    spec = MarketSpec(course_capacities=(1, 1), dorm_capacities=(1,), bundle_size=1, num_students=1)
    prefs = PreferenceProfile(course_values=np.array([[1.0, 4.0]]), dorm_values=np.array([[2.0]]))
    allocation = run_independent_rsd(
        TieBreakDraw(r_c=np.array([0]), r_d=np.array([0])), spec, prefs
    )
    assert prefs.utilities(allocation)[0] == 6.0


# ---------------------------------------------------------------------------
# Variant equivalence and kernel/reference agreement
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(100))
def test_singleton_signal_space_equals_independent_rsd(seed):
    spec, prefs, _, _ = _random_instance(seed, n=7)
    rng = np.random.default_rng(10_000 + seed)
    tiebreak = TieBreakDraw(r_c=rng.permutation(7), r_d=rng.permutation(7))
    psd, _, _ = run_paired_sd(np.zeros(7, dtype=int), tiebreak, spec, prefs)
    irsd = run_independent_rsd(tiebreak, spec, prefs)
    assert psd == irsd


@pytest.mark.parametrize("seed", range(25))
def test_fast_paired_sd_matches_market_reference(seed):
    spec, prefs, signals, tiebreak = _random_instance(seed)
    allocation, trace_c, trace_d = run_paired_sd(signals, tiebreak, spec, prefs)

    bundles, ref_trace_c = run_sd("courses", order_for_courses(signals, tiebreak.r_c), spec, prefs)
    dorms, ref_trace_d = run_sd("dorms", order_for_dorms(signals, tiebreak.r_d), spec, prefs)
    assert np.array_equal(allocation.courses, bundles)
    assert np.array_equal(allocation.dorms, dorms)
    assert np.array_equal(trace_c.fill_position, ref_trace_c.fill_position)
    assert np.array_equal(trace_d.fill_position, ref_trace_d.fill_position)


# ---------------------------------------------------------------------------
# Expected payoffs
# ---------------------------------------------------------------------------


def test_expected_payoffs_deterministic_profile_any_draw_count():
    spec, prefs = motivating_example()
    for draws in (1, 7):
        np.testing.assert_allclose(
            expected_payoffs(np.array([1, 0]), spec, prefs, draws, seed=3), [10.0, 10.0]
        )


def test_expected_payoffs_single_draw_equals_single_run():
    spec, prefs, signals, _ = _random_instance(23)
    rng = stream(5, "payoff", 0)
    tiebreak = TieBreakDraw(
        r_c=rng.permutation(spec.num_students).astype(np.int64),
        r_d=rng.permutation(spec.num_students).astype(np.int64),
    )
    allocation, _, _ = run_paired_sd(signals, tiebreak, spec, prefs)
    np.testing.assert_allclose(
        expected_payoffs(signals, spec, prefs, 1, seed=5), prefs.utilities(allocation)
    )


def test_enumeration_guard_trips():
    spec, prefs, _, _ = _random_instance(1, n=9)
    with pytest.raises(GuardError):
        exact_market_assignments("courses", np.zeros(9, dtype=int), spec, prefs, limit=10)


# ---------------------------------------------------------------------------
# Counterfactual evaluators
# ---------------------------------------------------------------------------


def test_counterfactual_exact_doug_vector_in_expectation():
    spec, prefs = motivating_example()
    signals = np.array([1, 0])  # Chris reports courses; Doug's vector over both signals
    vectors = [
        counterfactual_payoffs_exact(1, signals, tb, spec, prefs, 2) for tb in _all_tiebreaks(2)
    ]
    mean = np.mean(vectors, axis=0)
    np.testing.assert_allclose(mean, [10.0, 5.5])


@pytest.mark.parametrize("seed", range(10))
def test_identity_deviation_returns_realized_payoff(seed):
    spec, prefs, signals, tiebreak = _random_instance(seed)
    allocation, trace_c, trace_d = run_paired_sd(signals, tiebreak, spec, prefs)
    realized = prefs.utilities(allocation)
    for i in range(spec.num_students):
        exact = counterfactual_payoffs_exact(i, signals, tiebreak, spec, prefs, 3)
        frozen = counterfactual_payoffs_frozen(
            i, trace_c, trace_d, signals, tiebreak, spec, prefs, 3
        )
        assert exact[signals[i]] == pytest.approx(realized[i])
        assert frozen[signals[i]] == pytest.approx(realized[i])


def test_counterfactual_exact_three_students_hand_rerun():
    spec, prefs, signals, tiebreak = _random_instance(77, n=3, c=3, d=2, k=1, num_signals=2)
    i = 1
    vector = counterfactual_payoffs_exact(i, signals, tiebreak, spec, prefs, 2)
    for s in range(2):
        modified = signals.copy()
        modified[i] = s
        allocation, _, _ = run_paired_sd(modified, tiebreak, spec, prefs)
        assert vector[s] == pytest.approx(prefs.utilities(allocation)[i])


@pytest.mark.parametrize("seed", range(15))
def test_frozen_matrix_agrees_with_python_reference(seed):
    spec, prefs, signals, tiebreak = _random_instance(seed, n=10, num_signals=4)
    _, trace_c, trace_d = run_paired_sd(signals, tiebreak, spec, prefs)
    matrix = frozen_payoff_matrix(signals, tiebreak, spec, prefs, 4)
    for i in range(spec.num_students):
        reference = counterfactual_payoffs_frozen(
            i, trace_c, trace_d, signals, tiebreak, spec, prefs, 4
        )
        np.testing.assert_allclose(matrix[i], reference)


def test_frozen_equals_exact_on_motivating_example():
    spec, prefs = motivating_example()
    signals = np.array([1, 0])
    for tb in _all_tiebreaks(2):
        _, trace_c, trace_d = run_paired_sd(signals, tb, spec, prefs)
        for i in range(2):
            exact = counterfactual_payoffs_exact(i, signals, tb, spec, prefs, 2)
            frozen = counterfactual_payoffs_frozen(
                i, trace_c, trace_d, signals, tb, spec, prefs, 2
            )
            np.testing.assert_allclose(frozen, exact)


def test_frozen_approximation_close_to_exact_at_scale():
    # diagnostic bound: on a mid-sized randomized economy the frozen trace
    # evaluation stays within a few percent of exact re-running
    spec, prefs = section5_scenario(seed=3, num_students=200)
    rng = np.random.default_rng(8)
    signals = rng.integers(0, 10, 200)
    tiebreak = TieBreakDraw(r_c=rng.permutation(200), r_d=rng.permutation(200))
    matrix = frozen_payoff_matrix(signals, tiebreak, spec, prefs, 10)
    sample = rng.choice(200, size=30, replace=False)
    gaps = []
    for i in sample:
        exact = counterfactual_payoffs_exact(int(i), signals, tiebreak, spec, prefs, 10)
        gaps.append(np.abs(matrix[i] - exact))
    mad = float(np.mean(gaps))
    scale = float(np.mean(np.abs(matrix[sample])))
    assert mad / scale < 0.05


# ---------------------------------------------------------------------------
# Heuristic signals
# ---------------------------------------------------------------------------


def test_heuristic_signal_examples():
    lam = np.exp(np.array([0.8, -7.0, 0.0]))
    prefs = PreferenceProfile(
        course_values=np.ones((3, 2)),
        dorm_values=np.ones((3, 2)),
        lam=lam,
        gam=np.ones(3),
    )
    assert heuristic_signals(prefs, 10).tolist() == [5, 0, 4]


def test_heuristic_signal_clamps_high():
    prefs = PreferenceProfile(
        course_values=np.ones((1, 2)),
        dorm_values=np.ones((1, 2)),
        lam=np.array([np.exp(9.0)]),
        gam=np.array([1.0]),
    )
    assert heuristic_signals(prefs, 10).tolist() == [9]


def test_heuristic_requires_positive_parameters():
    prefs = PreferenceProfile(
        course_values=np.ones((1, 2)),
        dorm_values=np.ones((1, 2)),
        lam=np.array([0.0]),
        gam=np.array([1.0]),
    )
    with pytest.raises(ValueError):
        heuristic_signals(prefs, 10)
