"""Equilibrium computation: exponential-weights learning and exact oracles.

At scale, each student runs full-information exponential weights over the
signal space: every iteration they play a signal drawn from their mixture,
observe their mean payoff for every signal across the iteration's tie-break
draws, and tilt their mixture toward signals they regret not playing.  For
tiny instances an exhaustive enumerator finds every pure Nash profile with
exact expected payoffs.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .market import ConfigurationError, GuardError, MarketSpec, PreferenceProfile, TieBreakDraw
from .mechanisms import (
    exact_payoff_matrix,
    expected_payoffs_exact,
    frozen_payoff_matrix,
)
from .rng import stream

BRUTE_FORCE_MAX_STUDENTS = 5
BRUTE_FORCE_MAX_SIGNALS = 4

# Population size above which the learner switches from exact counterfactual
# re-runs to the frozen-trace approximation.
EXACT_COUNTERFACTUAL_MAX_STUDENTS = 100


def default_learning_rate(num_signals: int, iterations: int) -> float:
    return math.sqrt(8.0 * math.log(max(num_signals, 1)) / iterations)


@dataclass(frozen=True)
class LearnerConfig:
    iterations: int = 200
    draws_per_iteration: int = 200
    eta: float | Callable[[int], float] | None = None
    seed: int = 0
    counterfactual: str = "auto"  # "auto" | "frozen" | "exact"
    update_mode: str = "per_draw"  # "per_draw" | "per_iteration"
    threads: int = 1

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.draws_per_iteration < 1:
            raise ConfigurationError("iterations and draws_per_iteration must be >= 1")
        if self.counterfactual not in ("auto", "frozen", "exact"):
            raise ConfigurationError(f"unknown counterfactual mode {self.counterfactual!r}")
        if self.update_mode not in ("per_draw", "per_iteration"):
            raise ConfigurationError(f"unknown update mode {self.update_mode!r}")

    def rate(self, num_signals: int) -> Callable[[int], float]:
        if self.eta is None:
            steps = self.iterations
            if self.update_mode == "per_draw":
                steps *= self.draws_per_iteration
            eta = default_learning_rate(num_signals, steps)
            return lambda t: eta
        if callable(self.eta):
            return self.eta
        eta = float(self.eta)
        if eta <= 0:
            raise ConfigurationError("learning rate must be positive")
        return lambda t: eta

    def with_updates(self, **kwargs) -> "LearnerConfig":
        return replace(self, **kwargs)


@dataclass
class RegretTrace:
    """Per-iteration regret and purity diagnostics of one learning run.

    ``total_regret``/``mean_regret`` are the iteration's realized regret
    (best signal this iteration minus the played one); the ``avg_*`` fields
    carry the running time-averaged external regret over the history so far.
    """

    total_regret: np.ndarray
    mean_regret: np.ndarray
    mean_relative_regret: np.ndarray
    avg_total_regret: np.ndarray
    avg_mean_regret: np.ndarray
    frac_top_09: np.ndarray
    frac_top_1m1e9: np.ndarray
    final_regret: np.ndarray
    payoff_range: np.ndarray

    @property
    def iterations(self) -> int:
        return len(self.total_regret)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["iteration", "total_regret", "mean_regret", "frac_top_signal_ge_0.9", "frac_top_signal_ge_1m1e9"]
            )
            for t in range(self.iterations):
                writer.writerow(
                    [
                        t,
                        f"{self.total_regret[t]:.10g}",
                        f"{self.mean_regret[t]:.10g}",
                        f"{self.frac_top_09[t]:.10g}",
                        f"{self.frac_top_1m1e9[t]:.10g}",
                    ]
                )


def exp_weights_update(
    weights: np.ndarray,
    payoffs: np.ndarray,
    eta: float,
    bounds: tuple[np.ndarray | float, np.ndarray | float],
) -> np.ndarray:
    """Multiplicative-weights step on min-max normalized payoffs.

    Works for a single student (1-D) or a whole population (2-D).  Degenerate
    bounds scale every signal equally and leave the mixture unchanged.
    """
    weights = np.asarray(weights, dtype=np.float64)
    payoffs = np.asarray(payoffs, dtype=np.float64)
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if lo.ndim == payoffs.ndim - 1:
        lo = lo[..., None]
        hi = hi[..., None]
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    normalized = np.where(span > 0, (payoffs - lo) / safe, 0.0)
    exponent = eta * normalized
    exponent = exponent - exponent.max(axis=-1, keepdims=True)
    updated = weights * np.exp(exponent)
    return updated / updated.sum(axis=-1, keepdims=True)


def sample_signals(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one signal per student from their mixture."""
    cum = np.cumsum(weights, axis=1)
    u = rng.random(weights.shape[0])
    played = (cum < u[:, None]).sum(axis=1)
    return np.minimum(played, weights.shape[1] - 1).astype(np.int64)


def learn_equilibrium(
    spec: MarketSpec,
    prefs: PreferenceProfile,
    num_signals: int,
    config: LearnerConfig,
    tiebreak: TieBreakDraw | None = None,
) -> tuple[np.ndarray, RegretTrace]:
    """Run exponential weights and return the mixed profile plus diagnostics.

    When ``tiebreak`` is given the draw is fixed for every iteration (the
    signal-after-tiebreak variant); otherwise each iteration averages payoffs
    over ``draws_per_iteration`` fresh draws.  Non-convergence shows up in
    the trace rather than as an error.
    """
    n = spec.num_students
    use_frozen = config.counterfactual == "frozen" or (
        config.counterfactual == "auto" and n > EXACT_COUNTERFACTUAL_MAX_STUDENTS
    )
    evaluate = frozen_payoff_matrix if use_frozen else exact_payoff_matrix
    rate = config.rate(num_signals)

    weights = np.full((n, num_signals), 1.0 / num_signals)
    lo = np.full(n, np.inf)
    hi = np.full(n, -np.inf)
    cum_cf = np.zeros((n, num_signals))
    cum_real = np.zeros(n)

    iters = config.iterations
    total_regret = np.zeros(iters)
    mean_regret = np.zeros(iters)
    mean_rel_regret = np.zeros(iters)
    avg_total = np.zeros(iters)
    avg_mean = np.zeros(iters)
    frac09 = np.zeros(iters)
    frac1m = np.zeros(iters)

    draws = config.draws_per_iteration if tiebreak is None else 1

    def one_draw(played: np.ndarray, t: int, m: int) -> np.ndarray:
        if tiebreak is not None:
            tb = tiebreak
        else:
            rng = stream(config.seed, "tiebreak", t, m)
            tb = TieBreakDraw(
                r_c=rng.permutation(n).astype(np.int64),
                r_d=rng.permutation(n).astype(np.int64),
            )
        return evaluate(played, tb, spec, prefs, num_signals)

    rows = np.arange(n)
    for t in range(iters):
        if config.update_mode == "per_draw":
            # one multiplicative step per tie-break draw, signals resampled
            # from the evolving mixture within the iteration
            matrix = np.zeros((n, num_signals))
            realized = np.zeros(n)
            for m in range(draws):
                played = sample_signals(weights, stream(config.seed, "signals", t, m))
                draw_matrix = one_draw(played, t, m)
                matrix += draw_matrix
                realized += draw_matrix[rows, played]
                lo = np.minimum(lo, draw_matrix.min(axis=1))
                hi = np.maximum(hi, draw_matrix.max(axis=1))
                weights = exp_weights_update(weights, draw_matrix, rate(t), (lo, hi))
            matrix /= draws
            realized /= draws
        else:
            played = sample_signals(weights, stream(config.seed, "signals", t))
            if config.threads > 1 and draws > 1:
                with ThreadPoolExecutor(max_workers=config.threads) as pool:
                    matrices = list(pool.map(lambda m: one_draw(played, t, m), range(draws)))
                matrix = np.sum(matrices, axis=0) / draws
            else:
                matrix = np.zeros((n, num_signals))
                for m in range(draws):
                    matrix += one_draw(played, t, m)
                matrix /= draws
            realized = matrix[rows, played]
            lo = np.minimum(lo, matrix.min(axis=1))
            hi = np.maximum(hi, matrix.max(axis=1))
            weights = exp_weights_update(weights, matrix, rate(t), (lo, hi))

        span = np.where(hi > lo, hi - lo, 1.0)
        instant = matrix.max(axis=1) - realized
        total_regret[t] = instant.sum()
        mean_regret[t] = instant.mean()
        mean_rel_regret[t] = (instant / span).mean()

        cum_cf += matrix
        cum_real += realized
        averaged = np.maximum(cum_cf.max(axis=1) - cum_real, 0.0) / (t + 1)
        avg_total[t] = averaged.sum()
        avg_mean[t] = averaged.mean()

        top = weights.max(axis=1)
        frac09[t] = np.mean(top >= 0.9)
        frac1m[t] = np.mean(top >= 1.0 - 1e-9)

    per_student = cum_cf.max(axis=1) / iters - cum_real / iters
    trace = RegretTrace(
        total_regret=total_regret,
        mean_regret=mean_regret,
        mean_relative_regret=mean_rel_regret,
        avg_total_regret=avg_total,
        avg_mean_regret=avg_mean,
        frac_top_09=frac09,
        frac_top_1m1e9=frac1m,
        final_regret=np.maximum(per_student, 0.0),
        payoff_range=np.where(hi > lo, hi - lo, 0.0),
    )
    return weights, trace


def external_regret(counterfactuals: np.ndarray, realized: np.ndarray) -> np.ndarray:
    """Per-student external regret of a play history.

    ``counterfactuals`` has shape (T, N, S) and ``realized`` (T, N); the
    result is the best fixed signal's average payoff minus the realized
    average, per student (not floored).
    """
    counterfactuals = np.asarray(counterfactuals, dtype=np.float64)
    realized = np.asarray(realized, dtype=np.float64)
    if counterfactuals.shape[0] == 0:
        raise ConfigurationError("history must be nonempty")
    return counterfactuals.mean(axis=0).max(axis=1) - realized.mean(axis=0)


@dataclass(frozen=True)
class PurityStats:
    frac_above_threshold: float
    frac_above_09: float
    frac_pure: float
    top_mass: np.ndarray


def purify(mixed: np.ndarray, threshold: float = 0.9) -> tuple[np.ndarray, PurityStats]:
    """Map each student to their most likely signal (argmax ties go low)."""
    if not 0.5 < threshold <= 1.0:
        raise ConfigurationError("purity threshold must lie in (0.5, 1]")
    mixed = np.asarray(mixed, dtype=np.float64)
    profile = mixed.argmax(axis=1).astype(np.int64)
    top = mixed.max(axis=1)
    stats = PurityStats(
        frac_above_threshold=float(np.mean(top >= threshold)),
        frac_above_09=float(np.mean(top >= 0.9)),
        frac_pure=float(np.mean(top >= 1.0 - 1e-9)),
        top_mass=top,
    )
    return profile, stats


def payoff_table(
    spec: MarketSpec, prefs: PreferenceProfile, num_signals: int
) -> dict[tuple[int, ...], np.ndarray]:
    """Exact expected utilities of every pure profile (guarded exhaustively)."""
    n = spec.num_students
    if n > BRUTE_FORCE_MAX_STUDENTS or num_signals > BRUTE_FORCE_MAX_SIGNALS:
        raise GuardError(
            f"brute force limited to N <= {BRUTE_FORCE_MAX_STUDENTS} students and "
            f"S <= {BRUTE_FORCE_MAX_SIGNALS} signals, got N={n}, S={num_signals}"
        )
    table = {}
    for profile in itertools.product(range(num_signals), repeat=n):
        signals = np.array(profile, dtype=np.int64)
        table[profile] = expected_payoffs_exact(signals, spec, prefs)
    return table


def brute_force_equilibria(
    spec: MarketSpec,
    prefs: PreferenceProfile,
    num_signals: int,
    tol: float = 1e-9,
) -> list[tuple[tuple[int, ...], np.ndarray]]:
    """All pure Nash profiles with their exact expected payoffs."""
    table = payoff_table(spec, prefs, num_signals)
    n = spec.num_students
    equilibria = []
    for profile, payoffs in table.items():
        nash = True
        for i in range(n):
            for s in range(num_signals):
                if s == profile[i]:
                    continue
                deviation = profile[:i] + (s,) + profile[i + 1 :]
                if table[deviation][i] > payoffs[i] + tol:
                    nash = False
                    break
            if not nash:
                break
        if nash:
            equilibria.append((profile, payoffs))
    return equilibria


def is_equilibrium(
    profile: np.ndarray,
    spec: MarketSpec,
    prefs: PreferenceProfile,
    evaluator: Callable[[np.ndarray], np.ndarray] | None = None,
    tol: float = 1e-9,
    num_signals: int | None = None,
) -> tuple[bool, list[tuple[int, int, float]]]:
    """Check a pure profile for profitable unilateral deviations.

    ``evaluator`` maps a pure profile to per-student expected utilities and
    defaults to exact enumeration; pass a Monte-Carlo evaluator (with a
    matching tolerance) for larger instances.  Returns the verdict plus the
    list of profitable deviations as (student, signal, gain).
    """
    profile = np.asarray(profile, dtype=np.int64)
    if num_signals is None:
        num_signals = int(profile.max()) + 1
    if evaluator is None:
        evaluator = lambda sig: expected_payoffs_exact(sig, spec, prefs)
    base = evaluator(profile)
    deviations = []
    for i in range(spec.num_students):
        for s in range(num_signals):
            if s == profile[i]:
                continue
            candidate = profile.copy()
            candidate[i] = s
            gain = float(evaluator(candidate)[i] - base[i])
            if gain > tol:
                deviations.append((i, s, gain))
    return (len(deviations) == 0), deviations
