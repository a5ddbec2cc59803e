"""Welfare statistics and the efficiency/fairness property oracles.

Everything here is read-only analytics over mechanism outputs: per-student
mean and spread of utility across tie-break draws, mechanism-to-mechanism
comparisons, envy and swap checks, an exhaustive Pareto-improvement search
for oracle-scale instances, and the deterministic-allocation run-out-time
check.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .market import (
    Allocation,
    ConfigurationError,
    GuardError,
    MarketSpec,
    PreferenceProfile,
    TieBreakDraw,
    run_out_times,
)
from .mechanisms import (
    _course_part,
    _dorm_part,
    exact_market_assignments,
    run_paired_sd,
)
from .rng import stream


@dataclass(frozen=True)
class StudentStats:
    """Per-student mean and standard deviation of utility across draws."""

    mean: np.ndarray
    std: np.ndarray
    samples: int

    def __post_init__(self) -> None:
        if self.mean.shape != self.std.shape:
            raise ConfigurationError("mean and std must have the same shape")


def _is_mixed(profile: np.ndarray) -> bool:
    return np.asarray(profile).ndim == 2


def outcome_stats(
    profile: np.ndarray,
    spec: MarketSpec,
    prefs: PreferenceProfile,
    draws: int,
    seed: int = 0,
    exact: bool = False,
) -> StudentStats:
    """Utility mean/std across tie-break draws (population std, ddof=0).

    ``profile`` is either a pure signal vector or an (N, S) mixture; mixed
    profiles resample signals on every draw.  ``exact=True`` enumerates all
    tie-break outcomes instead (pure profiles only) and uses the additive
    separability of utilities to enumerate the two markets independently.
    """
    n = spec.num_students
    if exact:
        if _is_mixed(profile):
            raise ConfigurationError("exact outcome stats require a pure profile")
        signals = np.asarray(profile, dtype=np.int64)
        course = exact_market_assignments("courses", signals, spec, prefs)
        dorm = exact_market_assignments("dorms", signals, spec, prefs)
        vc = np.stack([_course_part(b, prefs) for b in course])
        vd = np.stack([_dorm_part(d, prefs) for d in dorm])
        mean = vc.mean(axis=0) + vd.mean(axis=0)
        var = vc.var(axis=0) + vd.var(axis=0)
        return StudentStats(mean=mean, std=np.sqrt(var), samples=len(course) * len(dorm))

    if draws < 2:
        raise ConfigurationError("at least 2 draws are needed for a standard deviation")
    total = np.zeros(n)
    total_sq = np.zeros(n)
    mixed = _is_mixed(profile)
    for m in range(draws):
        rng = stream(seed, "stats", m)
        if mixed:
            from .learning import sample_signals

            signals = sample_signals(np.asarray(profile), rng)
        else:
            signals = np.asarray(profile, dtype=np.int64)
        tiebreak = TieBreakDraw(
            r_c=rng.permutation(n).astype(np.int64),
            r_d=rng.permutation(n).astype(np.int64),
        )
        allocation, _, _ = run_paired_sd(signals, tiebreak, spec, prefs)
        u = prefs.utilities(allocation)
        total += u
        total_sq += u * u
    mean = total / draws
    var = np.maximum(total_sq / draws - mean * mean, 0.0)
    return StudentStats(mean=mean, std=np.sqrt(var), samples=draws)


@dataclass(frozen=True)
class ComparisonReport:
    """Per-student percent changes of one mechanism against a baseline.

    Percent changes are NaN where the baseline is zero; such students are
    excluded from the percent aggregates but still counted in the
    improved/reduced tallies via the sign of the raw difference.
    """

    pct_mean_change: np.ndarray
    pct_std_change: np.ndarray
    mean_improved: np.ndarray
    std_reduced: np.ndarray

    @property
    def num_students(self) -> int:
        return len(self.pct_mean_change)

    @property
    def count_mean_improved(self) -> int:
        return int(self.mean_improved.sum())

    @property
    def count_std_reduced(self) -> int:
        return int(self.std_reduced.sum())

    @property
    def frac_mean_improved(self) -> float:
        return float(self.mean_improved.mean())

    @property
    def frac_std_reduced(self) -> float:
        return float(self.std_reduced.mean())

    @property
    def mean_pct_mean_change(self) -> float:
        return float(np.nanmean(self.pct_mean_change))

    @property
    def mean_pct_std_change(self) -> float:
        return float(np.nanmean(self.pct_std_change))


def compare(stats_new: StudentStats, stats_base: StudentStats) -> ComparisonReport:
    """Percent changes moving to ``stats_new`` from the ``stats_base`` mechanism."""
    if stats_new.mean.shape != stats_base.mean.shape:
        raise ConfigurationError("comparison requires the same population")
    with np.errstate(divide="ignore", invalid="ignore"):
        pct_mean = np.where(
            stats_base.mean != 0,
            (stats_new.mean - stats_base.mean) / stats_base.mean * 100.0,
            np.nan,
        )
        pct_std = np.where(
            stats_base.std != 0,
            (stats_new.std - stats_base.std) / stats_base.std * 100.0,
            np.nan,
        )
    return ComparisonReport(
        pct_mean_change=pct_mean,
        pct_std_change=pct_std,
        mean_improved=stats_new.mean > stats_base.mean,
        std_reduced=stats_new.std < stats_base.std,
    )


def envy_check(
    signals: np.ndarray,
    spec: MarketSpec,
    prefs: PreferenceProfile,
    draws: int | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Matrix of E[u_i(own bundle)] - E[u_i(student j's bundle)].

    Exact enumeration by default; pass ``draws`` for a Monte-Carlo estimate.
    At an equilibrium, no entry should be materially negative.
    """
    n = spec.num_students
    signals = np.asarray(signals, dtype=np.int64)
    cross_c = np.zeros((n, n))
    cross_d = np.zeros((n, n))

    def accumulate(bundles: np.ndarray, dorms: np.ndarray, weight: float) -> None:
        # values_of_bundle[i, j] = value of j's goods under i's preferences
        mask = bundles >= 0
        safe = np.where(mask, bundles, 0)
        for i in range(n):
            vals = np.where(mask, prefs.course_values[i][safe], 0.0).sum(axis=1)
            cross_c[i] += weight * vals
            housed = dorms >= 0
            dv = np.zeros(n)
            dv[housed] = prefs.dorm_values[i][dorms[housed]]
            cross_d[i] += weight * dv

    if draws is None:
        course = exact_market_assignments("courses", signals, spec, prefs)
        dorm = exact_market_assignments("dorms", signals, spec, prefs)
        for bundles in course:
            accumulate(bundles, np.full(n, -1), 1.0 / len(course))
        zero = np.zeros((n, spec.bundle_size), dtype=np.int32) - 1
        for dorms in dorm:
            accumulate(zero, dorms, 1.0 / len(dorm))
    else:
        for m in range(draws):
            rng = stream(seed, "envy", m)
            tiebreak = TieBreakDraw(
                r_c=rng.permutation(n).astype(np.int64),
                r_d=rng.permutation(n).astype(np.int64),
            )
            allocation, _, _ = run_paired_sd(signals, tiebreak, spec, prefs)
            accumulate(allocation.courses, allocation.dorms, 1.0 / draws)

    expected = cross_c + cross_d
    own = np.diag(expected)
    return own[:, None] - expected


def mutual_swap_check(
    allocation: Allocation,
    prefs: PreferenceProfile,
    pairs: list[tuple[int, int]] | None = None,
) -> list[tuple[int, int]]:
    """Pairs where both students strictly prefer the other's courses and dorm."""
    n = prefs.num_students
    if pairs is None:
        pairs = list(itertools.combinations(range(n), 2))

    def value_of(i: int, j: int) -> float:
        bundle = allocation.courses[j]
        total = float(sum(prefs.course_values[i, c] for c in bundle if c >= 0))
        if allocation.dorms[j] >= 0:
            total += float(prefs.dorm_values[i, allocation.dorms[j]])
        return total

    swaps = []
    for i, j in pairs:
        if value_of(i, j) > value_of(i, i) and value_of(j, i) > value_of(j, j):
            swaps.append((i, j))
    return swaps


PARETO_SEARCH_GUARD = 10_000_000


def pareto_improvement_search(
    allocation: Allocation,
    spec: MarketSpec,
    prefs: PreferenceProfile,
) -> Allocation | None:
    """Exhaustively search for a Pareto improvement over ``allocation``.

    Enumerates capacity-feasible allocations by depth-first search over
    per-student options, pruned to weak improvements; returns one improving
    allocation or None.  Guarded by the raw option-count product.
    """
    n = spec.num_students
    num_c = spec.num_courses
    num_d = spec.num_dorms
    k = spec.bundle_size
    current = prefs.utilities(allocation)

    bundles = []
    for size in range(k + 1):
        bundles.extend(itertools.combinations(range(num_c), size))
    options_per_student = len(bundles) * (num_d + 1)
    if options_per_student**n > PARETO_SEARCH_GUARD:
        raise GuardError(
            f"pareto search would enumerate ~{options_per_student ** n} allocations"
        )

    options: list[list[tuple[tuple[int, ...], int, float]]] = []
    for i in range(n):
        mine = []
        for bundle in bundles:
            base = float(sum(prefs.course_values[i, c] for c in bundle))
            for d in range(-1, num_d):
                u = base + (float(prefs.dorm_values[i, d]) if d >= 0 else 0.0)
                if u >= current[i] - 1e-12:
                    mine.append((bundle, d, u))
        # at equal utility prefer fuller assignments (housed, larger bundles)
        mine.sort(key=lambda t: (-t[2], t[1] < 0, -len(t[0])))
        options.append(mine)

    caps_c = list(spec.course_capacities)
    caps_d = list(spec.dorm_capacities)
    chosen: list[tuple[tuple[int, ...], int]] = []

    def dfs(i: int, any_strict: bool) -> bool:
        if i == n:
            return any_strict
        for bundle, d, u in options[i]:
            if any(caps_c[c] <= 0 for c in bundle):
                continue
            if d >= 0 and caps_d[d] <= 0:
                continue
            for c in bundle:
                caps_c[c] -= 1
            if d >= 0:
                caps_d[d] -= 1
            chosen.append((bundle, d))
            if dfs(i + 1, any_strict or u > current[i] + 1e-12):
                return True
            chosen.pop()
            for c in bundle:
                caps_c[c] += 1
            if d >= 0:
                caps_d[d] += 1
        return False

    if not dfs(0, False):
        return None
    rows = [list(b) for b, _ in chosen]
    out = np.full((n, k), -1, dtype=np.int32)
    for i, row in enumerate(rows):
        out[i, : len(row)] = sorted(row)
    return Allocation(courses=out, dorms=np.array([d for _, d in chosen], dtype=np.int32))


@dataclass(frozen=True)
class DeterminismReport:
    """Outcome of the deterministic-allocation and run-out-time check.

    ``fill_times_on_cutoffs`` is the strict boundary check, evaluated when
    fill positions themselves are draw-independent; when they wobble within
    a signal-class window (a finite-population effect of within-class
    ordering), it is None and ``fill_windows_deterministic`` carries the
    exact finite analog: every good runs out in the same class window under
    every draw.
    """

    is_deterministic: bool
    per_student_deterministic: np.ndarray
    num_deterministic_students: int
    fill_times_on_cutoffs: bool | None
    fill_windows_deterministic: bool | None
    course_fill_times: np.ndarray
    dorm_fill_times: np.ndarray
    cutoffs: np.ndarray


def determinism_check(
    signals: np.ndarray,
    spec: MarketSpec,
    prefs: PreferenceProfile,
    draws: int,
    seed: int = 0,
) -> DeterminismReport:
    """Check whether a pure profile induces a draw-independent allocation.

    When it does, every filled good's normalized run-out time must lie on a
    signal-class boundary of its own market (within half a pick).
    """
    if draws < 2:
        raise ConfigurationError("determinism check needs at least 2 draws")
    n = spec.num_students
    signals = np.asarray(signals, dtype=np.int64)
    num_signals = int(signals.max()) + 1

    ref_alloc = None
    ref_fill_c = None
    ref_fill_d = None
    stable = np.ones(n, dtype=bool)
    fills_stable = True
    windows_stable = True
    ref_windows = None
    for m in range(draws):
        rng = stream(seed, "determinism", m)
        tiebreak = TieBreakDraw(
            r_c=rng.permutation(n).astype(np.int64),
            r_d=rng.permutation(n).astype(np.int64),
        )
        allocation, trace_c, trace_d = run_paired_sd(signals, tiebreak, spec, prefs)
        windows = (
            _fill_windows(trace_c, signals, num_signals, "courses"),
            _fill_windows(trace_d, signals, num_signals, "dorms"),
        )
        if ref_alloc is None:
            ref_alloc, ref_fill_c, ref_fill_d = allocation, trace_c, trace_d
            ref_windows = windows
            continue
        same_course = (allocation.courses == ref_alloc.courses).all(axis=1)
        same_dorm = allocation.dorms == ref_alloc.dorms
        stable &= same_course & same_dorm
        fills_stable = fills_stable and np.array_equal(
            trace_c.fill_position, ref_fill_c.fill_position
        ) and np.array_equal(trace_d.fill_position, ref_fill_d.fill_position)
        windows_stable = windows_stable and all(
            np.array_equal(w, rw) for w, rw in zip(windows, ref_windows)
        )

    deterministic = bool(stable.all())
    times_c = run_out_times(ref_fill_c, signals, num_signals, market="courses")
    times_d = run_out_times(ref_fill_d, signals, num_signals, market="dorms")

    on_cutoffs: bool | None = None
    windows_det: bool | None = None
    if deterministic:
        windows_det = windows_stable
        if fills_stable:
            tol = 1.0 / (2 * n)
            ok = True
            for times, trace in ((times_c, ref_fill_c), (times_d, ref_fill_d)):
                filled = trace.filled() & (trace.fill_position > 0)
                for t in times.fill_times[filled]:
                    if np.min(np.abs(times.boundaries - t)) > tol:
                        ok = False
            on_cutoffs = ok

    return DeterminismReport(
        is_deterministic=deterministic,
        per_student_deterministic=stable,
        num_deterministic_students=int(stable.sum()),
        fill_times_on_cutoffs=on_cutoffs,
        fill_windows_deterministic=windows_det,
        course_fill_times=times_c.fill_times,
        dorm_fill_times=times_d.fill_times,
        cutoffs=times_c.cutoffs,
    )


def _fill_windows(trace, signals: np.ndarray, num_signals: int, market: str) -> np.ndarray:
    """Index of the signal-class boundary interval each filled good falls in."""
    times = run_out_times(trace, signals, num_signals, market=market)
    filled = trace.filled() & (trace.fill_position > 0)
    half_pick = 1.0 / (2 * trace.num_students)
    out = np.full(len(trace.fill_position), -1, dtype=np.int64)
    out[filled] = np.searchsorted(
        times.boundaries + half_pick, times.fill_times[filled], side="left"
    )
    return out


def same_course_distribution(
    i: int,
    signals: np.ndarray,
    alt_signal: int,
    spec: MarketSpec,
    prefs: PreferenceProfile,
) -> bool:
    """Whether student ``i`` gets the same distribution of course bundles at
    ``alt_signal`` as at their current signal, certified by exhaustive
    enumeration of tie-break outcomes (sorted bundle multisets)."""
    signals = np.asarray(signals, dtype=np.int64)

    def bundle_law(profile: np.ndarray) -> dict[tuple[int, ...], float]:
        assignments = exact_market_assignments("courses", profile, spec, prefs)
        counts: dict[tuple[int, ...], float] = {}
        for b in assignments:
            key = tuple(b[i])
            counts[key] = counts.get(key, 0.0) + 1.0 / len(assignments)
        return counts

    return bundle_law(signals) == bundle_law(_replaced(signals, i, alt_signal))


def _replaced(signals: np.ndarray, i: int, value: int) -> np.ndarray:
    out = signals.copy()
    out[i] = value
    return out


def write_student_stats_csv(
    path: str | Path,
    stats: StudentStats,
    prefs: PreferenceProfile,
    signals: np.ndarray | None = None,
) -> None:
    n = len(stats.mean)
    lam = prefs.lam if prefs.lam is not None else np.full(n, np.nan)
    gam = prefs.gam if prefs.gam is not None else np.full(n, np.nan)
    sig = signals if signals is not None else np.full(n, -1, dtype=int)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id", "lambda", "gamma", "signal", "mean_utility", "std_utility"])
        for i in range(n):
            writer.writerow(
                [i, f"{lam[i]:.10g}", f"{gam[i]:.10g}", int(sig[i]), f"{stats.mean[i]:.10g}", f"{stats.std[i]:.10g}"]
            )


def write_comparison_csv(path: str | Path, report: ComparisonReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id", "pct_mean_change", "pct_std_change"])
        for i in range(report.num_students):
            writer.writerow(
                [i, f"{report.pct_mean_change[i]:.10g}", f"{report.pct_std_change[i]:.10g}"]
            )
