"""End-to-end experiment pipelines for the four mechanism variants.

Each pipeline generates an economy, learns (or constructs) a signal
profile, evaluates welfare statistics across tie-break draws, and compares
against the relevant baseline.  Replications differ only in the seed; all
randomness is keyed so results are machine- and thread-count independent.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .learning import LearnerConfig, RegretTrace, learn_equilibrium, purify
from .market import MarketSpec, PreferenceProfile, TieBreakDraw
from .mechanisms import heuristic_signals, run_tiebreak_first
from .rng import stream, substream_seed
from .scenarios import section5_scenario
from .welfare import (
    ComparisonReport,
    StudentStats,
    compare,
    determinism_check,
    outcome_stats,
)


@dataclass
class VariantResult:
    """One mechanism variant evaluated on one economy."""

    signals: np.ndarray | None
    mixed: np.ndarray | None
    trace: RegretTrace | None
    stats: StudentStats


@dataclass
class ExperimentResult:
    """Everything the reporting layer needs from one replication."""

    spec: MarketSpec
    prefs: PreferenceProfile
    psd: VariantResult
    irsd: VariantResult
    comparison: ComparisonReport
    num_deterministic_students: int | None = None

    def summary(self) -> dict:
        out = {
            "n_students": self.spec.num_students,
            "frac_mean_improved": self.comparison.frac_mean_improved,
            "mean_pct_mean_change": self.comparison.mean_pct_mean_change,
            "frac_std_reduced": self.comparison.frac_std_reduced,
            "mean_pct_std_change": self.comparison.mean_pct_std_change,
            "n_deterministic_students": self.num_deterministic_students,
            "final_total_regret": (
                float(self.psd.trace.total_regret[-1]) if self.psd.trace is not None else None
            ),
        }
        return out


def irsd_stats(
    spec: MarketSpec, prefs: PreferenceProfile, draws: int, seed: int
) -> StudentStats:
    profile = np.zeros(spec.num_students, dtype=np.int64)
    return outcome_stats(profile, spec, prefs, draws, seed=seed)


def learn_and_evaluate(
    spec: MarketSpec,
    prefs: PreferenceProfile,
    num_signals: int,
    learner: LearnerConfig,
    stats_draws: int,
    seed: int,
    threads: int = 1,
) -> VariantResult:
    cfg = learner.with_updates(seed=substream_seed(seed, "learn", num_signals), threads=threads)
    mixed, trace = learn_equilibrium(spec, prefs, num_signals, cfg)
    profile, _ = purify(mixed)
    stats = outcome_stats(
        profile, spec, prefs, stats_draws, seed=substream_seed(seed, "stats", num_signals)
    )
    return VariantResult(signals=profile, mixed=mixed, trace=trace, stats=stats)


def base_experiment(
    seed: int,
    num_students: int = 1000,
    num_signals: int = 10,
    learner: LearnerConfig | None = None,
    stats_draws: int = 1000,
    threads: int = 1,
    spec: MarketSpec | None = None,
    prefs: PreferenceProfile | None = None,
) -> ExperimentResult:
    """Learned paired serial dictatorship versus independent RSD."""
    if spec is None or prefs is None:
        spec, prefs = section5_scenario(seed, num_students=num_students)
    learner = learner or LearnerConfig()
    psd = learn_and_evaluate(spec, prefs, num_signals, learner, stats_draws, seed, threads)
    base = irsd_stats(spec, prefs, stats_draws, substream_seed(seed, "stats-irsd"))
    irsd = VariantResult(signals=None, mixed=None, trace=None, stats=base)
    return ExperimentResult(
        spec=spec,
        prefs=prefs,
        psd=psd,
        irsd=irsd,
        comparison=compare(psd.stats, base),
    )


def expansion_experiment(
    seed: int,
    base: ExperimentResult,
    expanded_signals: int = 20,
    learner: LearnerConfig | None = None,
    stats_draws: int = 1000,
    threads: int = 1,
) -> tuple[VariantResult, ComparisonReport]:
    """Re-learn with a richer signal space on the same economy; compare to base."""
    learner = learner or LearnerConfig()
    wide = learn_and_evaluate(
        base.spec, base.prefs, expanded_signals, learner, stats_draws, seed, threads
    )
    return wide, compare(wide.stats, base.psd.stats)


def tiebreak_first_experiment(
    seed: int,
    base: ExperimentResult,
    num_signals: int = 10,
    num_draws: int = 200,
    learner: LearnerConfig | None = None,
) -> tuple[StudentStats, ComparisonReport]:
    """Announce tie-breaks before signaling; learn one equilibrium per draw.

    Statistics are taken across the sampled draws (each draw's outcome is
    deterministic given its learned profile).
    """
    spec, prefs = base.spec, base.prefs
    n = spec.num_students
    learner = learner or LearnerConfig()
    draws = []
    for d in range(num_draws):
        rng = stream(seed, "tbf-draw", d)
        draws.append(
            TieBreakDraw(
                r_c=rng.permutation(n).astype(np.int64),
                r_d=rng.permutation(n).astype(np.int64),
            )
        )
    cfg = learner.with_updates(seed=substream_seed(seed, "tbf-learn"))
    outcomes = run_tiebreak_first(spec, prefs, num_signals, cfg, draws)
    utilities = np.stack([prefs.utilities(allocation) for _, allocation in outcomes])
    mean = utilities.mean(axis=0)
    std = utilities.std(axis=0)
    stats = StudentStats(mean=mean, std=std, samples=num_draws)
    return stats, compare(stats, base.psd.stats)


def heuristic_experiment(
    seed: int,
    base: ExperimentResult,
    num_signals: int = 10,
    stats_draws: int = 1000,
    determinism_draws: int = 200,
) -> tuple[VariantResult, ComparisonReport, int]:
    """Myopic log-ratio signaling versus independent RSD on the same economy."""
    spec, prefs = base.spec, base.prefs
    profile = heuristic_signals(prefs, num_signals)
    stats = outcome_stats(
        profile, spec, prefs, stats_draws, seed=substream_seed(seed, "stats-heuristic")
    )
    report = compare(stats, base.irsd.stats)
    det = determinism_check(
        profile, spec, prefs, determinism_draws, seed=substream_seed(seed, "det-heuristic")
    )
    result = VariantResult(signals=profile, mixed=None, trace=None, stats=stats)
    return result, report, det.num_deterministic_students
