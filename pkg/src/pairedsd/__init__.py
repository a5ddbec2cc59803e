"""Simulation laboratory for paired serial dictatorship.

Two linked one-sided markets (courses and dorms) are cleared by serial
dictatorship; students report a one-dimensional signal that buys an earlier
pick in one market at the cost of a later pick in the other.  The package
bundles the mechanism engine, equilibrium learning, exact small-instance
oracles, welfare analytics, and the coarse-signal optimal-transport solver
for the homogeneous-preferences benchmark.
"""

from .market import (
    Allocation,
    ConfigurationError,
    GuardError,
    MarketSpec,
    PreferenceProfile,
    RunOutTrace,
    SignalSpace,
    TieBreakDraw,
    best_bundle,
    order_for_courses,
    order_for_dorms,
    run_out_times,
    run_sd,
    signal_cutoffs,
)
from .mechanisms import (
    MechanismVariant,
    counterfactual_payoffs_exact,
    counterfactual_payoffs_frozen,
    expected_payoffs,
    expected_payoffs_exact,
    frozen_payoff_matrix,
    heuristic_signals,
    run_independent_rsd,
    run_paired_sd,
    run_tiebreak_first,
)
from .learning import (
    LearnerConfig,
    RegretTrace,
    brute_force_equilibria,
    exp_weights_update,
    external_regret,
    is_equilibrium,
    learn_equilibrium,
    payoff_table,
    purify,
)
from .welfare import (
    ComparisonReport,
    StudentStats,
    compare,
    determinism_check,
    envy_check,
    mutual_swap_check,
    outcome_stats,
    pareto_improvement_search,
)
from .transport import (
    LambdaGrid,
    Thresholds,
    TransportPlan,
    ValueDistribution,
    build_x,
    comonotone_couplings,
    comonotone_optimality_check,
    grid_search_oracle,
    solve_thresholds,
    welfare_objective,
)
from .scenarios import (
    ScenarioConfig,
    homogeneous_scenario,
    hyper_competition_example,
    load_config,
    motivating_example,
    random_composition,
    random_partition,
    section5_scenario,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
