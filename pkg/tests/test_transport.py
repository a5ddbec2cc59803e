"""Tests for the coarse-signal optimal transport solver and its oracles."""

import numpy as np
import pytest

from pairedsd.market import ConfigurationError, GuardError
from pairedsd.transport import (
    LambdaGrid,
    ValueDistribution,
    build_plan,
    build_x,
    comonotone_couplings,
    comonotone_optimality_check,
    foc_residuals,
    grid_search_oracle,
    quantile_coupling,
    signal_masses,
    solve_thresholds,
    summary_dict,
    theorem2_crosscheck,
    welfare_objective,
)


def _ratio_moments(grid):
    a = float(grid.weights @ (grid.points / (1 + grid.points)))
    b = float(grid.weights @ (1 / (1 + grid.points)))
    return a, b


def test_lambda_grid_validation():
    with pytest.raises(ConfigurationError):
        LambdaGrid(points=np.array([1.0, 1.0]), weights=np.array([0.5, 0.5]))
    with pytest.raises(ConfigurationError):
        LambdaGrid(points=np.array([-1.0, 1.0]), weights=np.array([0.5, 0.5]))
    with pytest.raises(ConfigurationError):
        LambdaGrid(points=np.array([1.0, 2.0]), weights=np.array([0.5, 0.6]))


def test_coarse_transport_figure_masses_reproduced_exactly():
    # uniform lambda on (0,1); thresholds (1/2, 2/3) split mass (1/2, 1/6, 1/3)
    grid = LambdaGrid.uniform(0.0, 1.0, 12)
    x = build_x(np.array([0.5, 2.0 / 3.0]), grid, 3)
    masses = signal_masses(x)
    np.testing.assert_allclose(masses, [0.5, 1.0 / 6.0, 1.0 / 3.0])
    # atoms exactly on a threshold go to the lower signal
    grid2 = LambdaGrid(points=np.array([0.25, 0.5, 0.75]), weights=np.full(3, 1 / 3))
    x2 = build_x(np.array([0.5]), grid2, 2)
    np.testing.assert_allclose(signal_masses(x2), [2 / 3, 1 / 3])


def test_build_x_single_signal_and_degenerate_cells():
    grid = LambdaGrid.uniform(0.0, 1.0, 6)
    x = build_x(np.empty(0), grid, 1)
    np.testing.assert_allclose(signal_masses(x), [1.0])
    # thresholds beyond the grid leave empty cells
    x = build_x(np.array([2.0]), grid, 2)
    np.testing.assert_allclose(signal_masses(x), [1.0, 0.0])
    x = build_x(np.array([1e-9]), grid, 2)
    np.testing.assert_allclose(signal_masses(x), [0.0, 1.0])


def test_quantile_coupling_mass_mismatch_raises():
    with pytest.raises(ConfigurationError):
        quantile_coupling(np.array([0.6, 0.6]), np.array([0.5, 0.5]))


def test_comonotone_couplings_single_signal_is_product():
    courses = ValueDistribution(values=np.array([1.0, 2.0]), masses=np.array([0.5, 0.5]))
    dorms = ValueDistribution(values=np.array([3.0, 4.0]), masses=np.array([0.25, 0.75]))
    y, z, _, _ = comonotone_couplings(np.array([1.0]), courses, dorms)
    np.testing.assert_allclose(y, [[0.5, 0.5]])
    np.testing.assert_allclose(z, [[0.25, 0.75]])


def test_comonotone_couplings_two_by_two_diagonal():
    courses = ValueDistribution(values=np.array([1.0, 2.0]), masses=np.array([0.5, 0.5]))
    dorms = ValueDistribution(values=np.array([1.0, 2.0]), masses=np.array([0.5, 0.5]))
    y, z, _, _ = comonotone_couplings(np.array([0.5, 0.5]), courses, dorms)
    # high signal pairs with the good course, low signal with the good dorm
    np.testing.assert_allclose(y, [[0.5, 0.0], [0.0, 0.5]])
    np.testing.assert_allclose(z, [[0.0, 0.5], [0.5, 0.0]])


def test_comonotone_couplings_figure_masses_against_four_tiers():
    masses = np.array([0.5, 1 / 6, 1 / 3])
    tiers = ValueDistribution(values=np.array([1.0, 2.0, 3.0, 4.0]), masses=np.full(4, 0.25))
    y, z, _, _ = comonotone_couplings(masses, tiers, tiers)
    expected_y = np.array(
        [
            [0.25, 0.25, 0.0, 0.0],
            [0.0, 0.0, 1 / 6, 0.0],
            [0.0, 0.0, 1 / 12, 0.25],
        ]
    )
    np.testing.assert_allclose(y, expected_y, atol=1e-12)
    expected_z = np.array(
        [
            [0.0, 0.0, 0.25, 0.25],
            [0.0, 1 / 6, 0.0, 0.0],
            [0.25, 1 / 12, 0.0, 0.0],
        ]
    )
    np.testing.assert_allclose(z, expected_z, atol=1e-12)


def test_plan_marginals_validated():
    grid = LambdaGrid.uniform(0.2, 1.2, 10)
    courses = ValueDistribution(values=np.array([1.0, 3.0]), masses=np.array([0.5, 0.5]))
    dorms = ValueDistribution(values=np.array([2.0, 5.0]), masses=np.array([0.7, 0.3]))
    plan = build_plan(np.array([0.7]), grid, courses, dorms, 2)
    plan.check_marginals(grid, courses, dorms)


def test_objective_single_signal_closed_form():
    grid = LambdaGrid.uniform(0.5, 2.5, 16)
    courses = ValueDistribution(values=np.array([1.0, 3.0]), masses=np.array([0.5, 0.5]))
    dorms = ValueDistribution(values=np.array([2.0, 5.0]), masses=np.array([0.25, 0.75]))
    a, b = _ratio_moments(grid)
    expected = a * courses.mean() + b * dorms.mean()
    assert welfare_objective(np.empty(0), grid, courses, dorms, 1) == pytest.approx(expected)


def test_objective_invariant_when_courses_are_constant():
    grid = LambdaGrid.uniform(0.5, 2.5, 12)
    courses = ValueDistribution(values=np.array([2.0, 2.0]), masses=np.array([0.5, 0.5]))
    dorms = ValueDistribution(values=np.array([2.0, 2.0]), masses=np.array([0.4, 0.6]))
    objs = {
        welfare_objective(np.array([t]), grid, courses, dorms, 2)
        for t in (0.7, 1.1, 1.9)
    }
    assert max(objs) - min(objs) < 1e-12


def test_objective_two_point_hand_computation():
    # two lambda types, two signals: high type to good course, low to good dorm
    grid = LambdaGrid(points=np.array([0.5, 2.0]), weights=np.array([0.5, 0.5]))
    courses = ValueDistribution(values=np.array([1.0, 3.0]), masses=np.array([0.5, 0.5]))
    dorms = ValueDistribution(values=np.array([1.0, 3.0]), masses=np.array([0.5, 0.5]))
    # threshold between the two types
    got = welfare_objective(np.array([1.0]), grid, courses, dorms, 2)
    expected = 0.5 * ((0.5 / 1.5) * 1.0 + (1 / 1.5) * 3.0) + 0.5 * ((2 / 3) * 3.0 + (1 / 3) * 1.0)
    assert got == pytest.approx(expected)


def test_objective_monotone_under_signal_refinement():
    grid = LambdaGrid.uniform(0.1, 3.0, 60)
    rng = np.random.default_rng(5)
    courses = ValueDistribution(values=np.sort(rng.uniform(1, 4, 4)), masses=np.full(4, 0.25))
    dorms = ValueDistribution(values=np.sort(rng.uniform(1, 4, 3)), masses=np.array([0.5, 0.25, 0.25]))
    best = []
    for n in (1, 2, 3, 4):
        if n == 1:
            best.append(welfare_objective(np.empty(0), grid, courses, dorms, 1))
        else:
            best.append(solve_thresholds(grid, n, courses, dorms).objective)
    assert all(b2 >= b1 - 1e-12 for b1, b2 in zip(best, best[1:]))


@pytest.mark.parametrize("seed", range(8))
def test_solver_matches_grid_oracle(seed):
    rng = np.random.default_rng(seed)
    grid = LambdaGrid.uniform(0.1, 3.0, 40)
    courses = ValueDistribution(
        values=np.sort(rng.uniform(0.5, 4.0, 3)), masses=np.array([0.5, 0.3, 0.2])
    )
    dorms = ValueDistribution(
        values=np.sort(rng.uniform(0.5, 4.0, 3)), masses=np.array([0.2, 0.5, 0.3])
    )
    n = 2 + seed % 2
    result = solve_thresholds(grid, n, courses, dorms)
    oracle_thresholds, oracle_obj = grid_search_oracle(grid, n, courses, dorms)
    assert result.objective >= oracle_obj - 1e-6 * abs(oracle_obj)
    step = np.max(np.diff(grid.points))
    assert np.max(np.abs(result.thresholds - oracle_thresholds)) <= step + 1e-9


def _log_symmetric_grid(size=64, spread=1.5):
    logs = np.linspace(-spread, spread, size + 1)
    mids = np.exp(0.5 * (logs[:-1] + logs[1:]))
    return LambdaGrid(points=mids, weights=np.full(size, 1.0 / size))


def test_foc_residuals_vanish_at_interior_optimum():
    # symmetric values with a lambda distribution symmetric under inversion:
    # the boundary type at lambda = 1 is exactly indifferent
    grid = _log_symmetric_grid()
    courses = ValueDistribution(values=np.array([1.0, 2.5]), masses=np.array([0.5, 0.5]))
    dorms = ValueDistribution(values=np.array([1.0, 2.5]), masses=np.array([0.5, 0.5]))
    result = solve_thresholds(grid, 2, courses, dorms)
    assert result.converged
    assert np.max(np.abs(result.foc_residuals)) <= 1e-8
    assert result.thresholds[0] == pytest.approx(1.0)


def test_foc_residuals_vanish_on_fine_tier_interior_instance():
    rng = np.random.default_rng(6)
    nc, nd = rng.integers(8, 15), rng.integers(8, 15)
    courses = ValueDistribution(values=np.sort(rng.uniform(0.5, 4, nc)), masses=np.full(nc, 1 / nc))
    dorms = ValueDistribution(values=np.sort(rng.uniform(0.5, 4, nd)), masses=np.full(nd, 1 / nd))
    grid = LambdaGrid.uniform(0.1, 3.0, 120)
    result = solve_thresholds(grid, 2, courses, dorms)
    assert result.converged
    assert np.max(np.abs(result.foc_residuals)) <= 1e-8


def test_kink_optimum_is_reported_not_forced():
    # when the optimal cut aligns cell mass with a tier boundary, the smooth
    # indifference condition does not apply; the solver still matches the
    # oracle and flags the unconverged first-order condition
    grid = LambdaGrid.uniform(0.1, 4.0, 200)
    courses = ValueDistribution(values=np.array([1.0, 2.5]), masses=np.array([0.5, 0.5]))
    dorms = ValueDistribution(values=np.array([1.0, 2.5]), masses=np.array([0.5, 0.5]))
    result = solve_thresholds(grid, 2, courses, dorms)
    _, oracle_obj = grid_search_oracle(grid, 2, courses, dorms)
    assert result.objective >= oracle_obj - 1e-9
    assert not result.converged
    assert np.max(np.abs(result.foc_residuals)) > 1e-3


def test_local_perturbation_never_improves_solution():
    rng = np.random.default_rng(12)
    grid = LambdaGrid.uniform(0.2, 2.2, 50)
    courses = ValueDistribution(values=np.sort(rng.uniform(1, 3, 3)), masses=np.full(3, 1 / 3))
    dorms = ValueDistribution(values=np.sort(rng.uniform(1, 3, 3)), masses=np.full(3, 1 / 3))
    result = solve_thresholds(grid, 3, courses, dorms)
    step = grid.points[1] - grid.points[0]
    for i in range(2):
        for delta in (-step, step):
            trial = result.thresholds.copy()
            trial[i] += delta
            trial = np.sort(trial)
            obj = welfare_objective(trial, grid, courses, dorms, 3)
            assert obj <= result.objective + 1e-10


def test_grid_search_oracle_guard():
    grid = LambdaGrid.uniform(0.1, 1.0, 600)
    courses = ValueDistribution(values=np.array([1.0]), masses=np.array([1.0]))
    with pytest.raises(GuardError):
        grid_search_oracle(grid, 4, courses, courses, guard=1000)


def test_comonotone_beats_permutations_and_antimonotone():
    weights = np.array([0.2, 0.5, 0.9])
    values = np.array([1.0, 2.0, 4.0])
    assert comonotone_optimality_check(weights, values)
    sorted_obj = float(np.sort(weights) @ np.sort(values))
    anti_obj = float(np.sort(weights) @ np.sort(values)[::-1])
    assert anti_obj < sorted_obj
    # single row is trivially optimal
    assert comonotone_optimality_check(np.array([1.0]), np.array([2.0]))
    with pytest.raises(GuardError):
        comonotone_optimality_check(np.ones(8), np.ones(8))


def test_grid_refinement_convergence():
    courses = ValueDistribution(values=np.array([1.0, 2.0, 4.0]), masses=np.full(3, 1 / 3))
    dorms = ValueDistribution(values=np.array([1.0, 3.0]), masses=np.array([0.5, 0.5]))
    objs = []
    for size in (32, 64, 128, 256):
        grid = LambdaGrid.uniform(0.1, 3.0, size)
        objs.append(solve_thresholds(grid, 2, courses, dorms).objective)
    diffs = [abs(b - a) for a, b in zip(objs, objs[1:])]
    # successive refinements shrink the change by at least the spacing ratio-ish
    assert diffs[1] <= 0.6 * diffs[0] + 1e-9
    assert diffs[2] <= 0.6 * diffs[1] + 1e-9


def test_summary_dict_reports_masses_and_residuals():
    grid = LambdaGrid.uniform(0.0, 1.0, 12)
    courses = ValueDistribution(values=np.array([1.0, 2.0]), masses=np.array([0.5, 0.5]))
    dorms = ValueDistribution(values=np.array([1.0, 2.0]), masses=np.array([0.5, 0.5]))
    payload = summary_dict(np.array([0.5, 2 / 3]), grid, courses, dorms, 3)
    np.testing.assert_allclose(payload["signal_masses"], [0.5, 1 / 6, 1 / 3])
    assert payload["zero_mass_signals"] == []
    assert len(payload["foc_residuals"]) == 2


# ---------------------------------------------------------------------------
# Simulation cross-check
# ---------------------------------------------------------------------------


def _homogeneous_fixture(n=120, seed=3):
    from pairedsd.scenarios import homogeneous_scenario

    course_values = np.array([1.0, 3.0])
    dorm_values = np.array([1.0, 3.0])
    caps_c = np.array([n // 2, n - n // 2])
    caps_d = np.array([n // 2, n - n // 2])
    spec, prefs = homogeneous_scenario(
        seed, n, course_values, dorm_values, caps_c, caps_d, lambda_low=0.1, lambda_high=10.0
    )
    return spec, prefs, course_values, dorm_values


def test_crosscheck_single_signal_matches_product_benchmark():
    spec, prefs, cv, dv = _homogeneous_fixture()
    report = theorem2_crosscheck(spec, prefs, cv, dv, num_signals=1, stats_draws=300, seed=1)
    assert report.simulated_welfare == pytest.approx(report.irsd_welfare)
    assert report.simulated_welfare == pytest.approx(report.optimum, abs=4 * report.simulated_se)


def test_crosscheck_motivating_preferences_screens_by_type():
    # two relative-preference types mirroring the introductory two-student story
    from pairedsd.scenarios import homogeneous_scenario
    from pairedsd.learning import LearnerConfig

    n = 40
    lam = np.array([10.0, 0.1] * (n // 2))
    spec, prefs = homogeneous_scenario(
        1, n, np.array([0.0, 1.0]), np.array([0.0, 1.0]),
        np.array([n // 2, n // 2]), np.array([n // 2, n // 2]), lam=lam,
    )
    config = LearnerConfig(iterations=80, draws_per_iteration=30, counterfactual="frozen")
    report = theorem2_crosscheck(
        spec, prefs, np.array([0.0, 1.0]), np.array([0.0, 1.0]), 2,
        learner_config=config, stats_draws=200, seed=2,
    )
    # high-lambda students reveal the high signal and take the good course
    assert (report.profile[lam > 1] == 1).mean() > 0.9
    assert (report.profile[lam < 1] == 0).mean() > 0.9
    assert report.signal_course_value[1] > report.signal_course_value[0]
    assert report.within_upper_bound
    assert report.ratio > 0.97
    assert report.psd_dominates_irsd
