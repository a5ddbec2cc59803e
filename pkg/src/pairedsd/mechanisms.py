"""The paired serial dictatorship mechanism and its payoff evaluators.

Students report a signal; the course market orders them by signal
descending and the dorm market by signal ascending, with a rank permutation
breaking ties within a signal in each market.  A singleton signal space
reduces the mechanism to running random serial dictatorship independently
in each market.
"""

from __future__ import annotations

import itertools
import math
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

from . import _kernels
from .market import (
    Allocation,
    ConfigurationError,
    GuardError,
    MarketSpec,
    PreferenceProfile,
    RunOutTrace,
    TieBreakDraw,
)
from .rng import stream


class MechanismVariant(Enum):
    PAIRED_SD = "paired_sd"
    INDEPENDENT_RSD = "independent_rsd"
    PAIRED_SD_TIEBREAK_FIRST = "tiebreak_first"
    PAIRED_SD_HEURISTIC = "heuristic"


def _as_signals(signals: np.ndarray, n: int) -> np.ndarray:
    out = np.asarray(signals, dtype=np.int64)
    if out.shape != (n,):
        raise ConfigurationError("signal profile does not match the population size")
    return out


def run_paired_sd(
    signals: np.ndarray,
    tiebreak: TieBreakDraw,
    spec: MarketSpec,
    prefs: PreferenceProfile,
) -> tuple[Allocation, RunOutTrace, RunOutTrace]:
    """Run both markets for a pure signal profile and one tie-break draw."""
    n = spec.num_students
    signals = _as_signals(signals, n)
    r_c = np.asarray(tiebreak.r_c, dtype=np.int64)
    r_d = np.asarray(tiebreak.r_d, dtype=np.int64)
    if r_c.shape != (n,):
        raise ConfigurationError("tie-break draw does not match the population size")
    order_c = _kernels.course_pick_order(signals, r_c)
    bundles, fill_c = _kernels.sd_courses(
        order_c,
        prefs.course_order(),
        prefs.course_values,
        np.asarray(spec.course_capacities, dtype=np.int64),
        spec.bundle_size,
    )
    order_d = _kernels.dorm_pick_order(signals, r_d)
    dorms, fill_d = _kernels.sd_dorms(
        order_d,
        prefs.dorm_order(),
        prefs.dorm_values,
        np.asarray(spec.dorm_capacities, dtype=np.int64),
    )
    allocation = Allocation(courses=bundles, dorms=dorms)
    return (
        allocation,
        RunOutTrace(fill_position=fill_c, num_students=n),
        RunOutTrace(fill_position=fill_d, num_students=n),
    )


def run_independent_rsd(
    tiebreak: TieBreakDraw, spec: MarketSpec, prefs: PreferenceProfile
) -> Allocation:
    """Serial dictatorship run independently in each market (all signals equal)."""
    signals = np.zeros(spec.num_students, dtype=np.int64)
    allocation, _, _ = run_paired_sd(signals, tiebreak, spec, prefs)
    return allocation


def expected_payoffs(
    signals: np.ndarray,
    spec: MarketSpec,
    prefs: PreferenceProfile,
    draws: int,
    seed: int,
) -> np.ndarray:
    """Monte-Carlo mean utility of every student at the played profile."""
    if draws < 1:
        raise ConfigurationError("draws must be at least 1")
    n = spec.num_students
    signals = _as_signals(signals, n)
    total = np.zeros(n)
    for m in range(draws):
        rng = stream(seed, "payoff", m)
        tiebreak = TieBreakDraw(
            r_c=rng.permutation(n).astype(np.int64),
            r_d=rng.permutation(n).astype(np.int64),
        )
        allocation, _, _ = run_paired_sd(signals, tiebreak, spec, prefs)
        total += prefs.utilities(allocation)
    return total / draws


# ---------------------------------------------------------------------------
# Exact enumeration over tie-break draws.
#
# Within a signal class, the pick order induced by a uniform rank permutation
# is uniform over the class's orderings and independent across classes, so
# enumerating per-class permutations (instead of all N! ranks) gives exact
# expectations.  Utilities are additively separable, which lets the two
# markets be enumerated independently.
# ---------------------------------------------------------------------------

DEFAULT_ENUMERATION_LIMIT = 500_000


def _ordering_count(signals: np.ndarray) -> int:
    counts = np.bincount(signals)
    return math.prod(math.factorial(int(c)) for c in counts)


def iter_market_orderings(market: str, signals: np.ndarray) -> Iterator[np.ndarray]:
    """All equally-likely pick orders of one market for a pure profile."""
    order = np.argsort(-signals if market == "courses" else signals, kind="stable")
    groups: list[list[int]] = []
    for i in order:
        s = signals[i]
        if groups and signals[groups[-1][0]] == s:
            groups[-1].append(int(i))
        else:
            groups.append([int(i)])
    for combo in itertools.product(*(itertools.permutations(g) for g in groups)):
        yield np.fromiter(itertools.chain.from_iterable(combo), dtype=np.int64)


def exact_market_assignments(
    market: str,
    signals: np.ndarray,
    spec: MarketSpec,
    prefs: PreferenceProfile,
    limit: int = DEFAULT_ENUMERATION_LIMIT,
) -> list[np.ndarray]:
    """Assignments of one market under every tie-break outcome (guarded)."""
    signals = _as_signals(signals, spec.num_students)
    count = _ordering_count(signals)
    if count > limit:
        raise GuardError(f"enumeration would need {count} orderings (limit {limit})")
    out = []
    for ordering in iter_market_orderings(market, signals):
        if market == "courses":
            bundles, fill = _kernels.sd_courses(
                ordering,
                prefs.course_order(),
                prefs.course_values,
                np.asarray(spec.course_capacities, dtype=np.int64),
                spec.bundle_size,
            )
            out.append(bundles)
        else:
            dorms, fill = _kernels.sd_dorms(
                ordering,
                prefs.dorm_order(),
                prefs.dorm_values,
                np.asarray(spec.dorm_capacities, dtype=np.int64),
            )
            out.append(dorms)
    return out


def _course_part(bundles: np.ndarray, prefs: PreferenceProfile) -> np.ndarray:
    mask = bundles >= 0
    vals = np.where(
        mask, np.take_along_axis(prefs.course_values, np.where(mask, bundles, 0), axis=1), 0.0
    )
    return vals.sum(axis=1)


def _dorm_part(dorms: np.ndarray, prefs: PreferenceProfile) -> np.ndarray:
    n = dorms.shape[0]
    out = np.zeros(n)
    housed = dorms >= 0
    out[housed] = prefs.dorm_values[np.arange(n)[housed], dorms[housed]]
    return out


def expected_payoffs_exact(
    signals: np.ndarray,
    spec: MarketSpec,
    prefs: PreferenceProfile,
    limit: int = DEFAULT_ENUMERATION_LIMIT,
) -> np.ndarray:
    """Exact expected utility of every student at a pure profile."""
    course = exact_market_assignments("courses", signals, spec, prefs, limit)
    dorm = exact_market_assignments("dorms", signals, spec, prefs, limit)
    mean_c = np.mean([_course_part(b, prefs) for b in course], axis=0)
    mean_d = np.mean([_dorm_part(d, prefs) for d in dorm], axis=0)
    return mean_c + mean_d


# ---------------------------------------------------------------------------
# Counterfactual payoffs for the learner.
# ---------------------------------------------------------------------------


def counterfactual_payoffs_exact(
    i: int,
    signals: np.ndarray,
    tiebreak: TieBreakDraw,
    spec: MarketSpec,
    prefs: PreferenceProfile,
    num_signals: int,
) -> np.ndarray:
    """Utility of student ``i`` at each signal, rerunning both markets.

    Everyone else's signals and the whole tie-break draw stay fixed; the
    deviator keeps their own ranks.
    """
    signals = _as_signals(signals, spec.num_students).copy()
    out = np.empty(num_signals)
    for s in range(num_signals):
        signals[i] = s
        allocation, _, _ = run_paired_sd(signals, tiebreak, spec, prefs)
        out[s] = float(prefs.utilities(allocation)[i])
    return out


def counterfactual_payoffs_frozen(
    i: int,
    trace_c: RunOutTrace,
    trace_d: RunOutTrace,
    signals: np.ndarray,
    tiebreak: TieBreakDraw,
    spec: MarketSpec,
    prefs: PreferenceProfile,
    num_signals: int,
) -> np.ndarray:
    """Utility of student ``i`` at each signal against the frozen run-out trace.

    No market is re-run: the deviator's pick position at each signal is
    computed from everyone else's signals and ranks, and the goods still
    unfilled at that position are taken as available.  At the realized signal
    this reproduces the realized bundle exactly; at other signals it is the
    measure-zero-deviator approximation.
    """
    n = spec.num_students
    signals = _as_signals(signals, n)
    own = int(signals[i])
    out = np.empty(num_signals)
    for s in range(num_signals):
        above = int(np.count_nonzero(signals > s)) - (1 if own > s else 0)
        below = int(np.count_nonzero(signals < s)) - (1 if own < s else 0)
        same = np.nonzero(signals == s)[0]
        tie_c = int(np.count_nonzero(tiebreak.r_c[same] > tiebreak.r_c[i]))
        tie_d = int(np.count_nonzero(tiebreak.r_d[same] > tiebreak.r_d[i]))
        pos_c = 1 + above + tie_c
        pos_d = 1 + below + tie_d
        avail_c = [c for c in range(spec.num_courses) if trace_c.fill_position[c] >= pos_c]
        avail_d = [d for d in range(spec.num_dorms) if trace_d.fill_position[d] >= pos_d]
        ranked = sorted(avail_c, key=lambda c: (-prefs.course_values[i, c], c))
        total = sum(prefs.course_values[i, c] for c in ranked[: spec.bundle_size])
        if avail_d:
            total += max(prefs.dorm_values[i, d] for d in avail_d)
        out[s] = total
    return out


def frozen_payoff_matrix(
    signals: np.ndarray,
    tiebreak: TieBreakDraw,
    spec: MarketSpec,
    prefs: PreferenceProfile,
    num_signals: int,
) -> np.ndarray:
    """Frozen counterfactual utilities for all students and signals at once."""
    n = spec.num_students
    signals = _as_signals(signals, n)
    matrix, _, _, _, _ = _kernels.evaluate_draw(
        signals,
        np.asarray(tiebreak.r_c, dtype=np.int64),
        np.asarray(tiebreak.r_d, dtype=np.int64),
        prefs.course_order(),
        prefs.course_values,
        prefs.dorm_order(),
        prefs.dorm_values,
        np.asarray(spec.course_capacities, dtype=np.int64),
        np.asarray(spec.dorm_capacities, dtype=np.int64),
        spec.bundle_size,
        num_signals,
    )
    return matrix


def exact_payoff_matrix(
    signals: np.ndarray,
    tiebreak: TieBreakDraw,
    spec: MarketSpec,
    prefs: PreferenceProfile,
    num_signals: int,
) -> np.ndarray:
    """Counterfactual utilities for all students by exact re-running."""
    n = spec.num_students
    out = np.empty((n, num_signals))
    for i in range(n):
        out[i] = counterfactual_payoffs_exact(i, signals, tiebreak, spec, prefs, num_signals)
    return out


def heuristic_signals(prefs: PreferenceProfile, num_signals: int = 10) -> np.ndarray:
    """Myopic reports by relative preference alone.

    Each student plays the signal nearest to ``midpoint + log(lambda/gamma)``
    where the midpoint is halfway between the lowest and highest signal;
    exact half-integer targets break toward the lower signal.
    """
    if prefs.lam is None or prefs.gam is None:
        raise ConfigurationError("heuristic play requires relative-preference parameters")
    if np.any(prefs.lam <= 0) or np.any(prefs.gam <= 0):
        raise ValueError("relative-preference parameters must be strictly positive")
    target = (num_signals - 1) / 2.0 + np.log(prefs.lam / prefs.gam)
    nearest = np.ceil(target - 0.5)
    return np.clip(nearest, 0, num_signals - 1).astype(np.int64)


def run_tiebreak_first(
    spec: MarketSpec,
    prefs: PreferenceProfile,
    num_signals: int,
    config,
    draws: Sequence[TieBreakDraw],
) -> list[tuple[np.ndarray, Allocation]]:
    """Learn an equilibrium separately for each pre-announced tie-break draw.

    Students observe the draw before signaling, so payoffs per profile are
    deterministic and the learner needs no inner Monte-Carlo.
    """
    from .learning import learn_equilibrium, purify

    results = []
    for idx, tiebreak in enumerate(draws):
        cfg = config.with_updates(draws_per_iteration=1, seed=config.seed + idx)
        mixed, _ = learn_equilibrium(spec, prefs, num_signals, cfg, tiebreak=tiebreak)
        profile, _ = purify(mixed)
        allocation, _, _ = run_paired_sd(profile, tiebreak, spec, prefs)
        results.append((profile, allocation))
    return results
