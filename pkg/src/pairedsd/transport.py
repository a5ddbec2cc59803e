"""Coarse-signal optimal transport for the homogeneous-preferences optimum.

With common course/dorm values and single-course demand, the best any
mechanism with n ordered signals can do is: partition the relative-preference
parameter lambda into n cells by thresholds, send high-lambda cells to
high-value courses (co-monotone coupling) and low-lambda cells to high-value
dorms (anti-monotone), and choose thresholds so boundary students are
indifferent between adjacent signals.  This module solves that problem on a
discretized lambda distribution and cross-checks the simulated mechanism
against it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .market import ConfigurationError, GuardError

MARGINAL_TOL = 1e-10
ORACLE_GUARD = 1_000_000
PERMUTATION_GUARD = 7
FALLBACK_BUDGET = 50_000


@dataclass(frozen=True)
class LambdaGrid:
    """Discrete distribution of the relative-preference parameter."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)
        if points.ndim != 1 or points.shape != weights.shape:
            raise ConfigurationError("grid points and weights must be 1-D and aligned")
        if np.any(np.diff(points) <= 0):
            raise ConfigurationError("grid points must be strictly increasing")
        if np.any(points <= 0):
            raise ConfigurationError("grid points must be strictly positive")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigurationError("grid weights must be nonnegative and sum to 1")

    @property
    def size(self) -> int:
        return len(self.points)

    @staticmethod
    def uniform(lo: float, hi: float, size: int) -> "LambdaGrid":
        """Midpoint discretization of the uniform distribution on (lo, hi)."""
        edges = np.linspace(lo, hi, size + 1)
        mids = 0.5 * (edges[:-1] + edges[1:])
        return LambdaGrid(points=mids, weights=np.full(size, 1.0 / size))

    @staticmethod
    def from_samples(lam: np.ndarray) -> "LambdaGrid":
        """Empirical distribution of observed lambda values."""
        points, counts = np.unique(np.asarray(lam, dtype=np.float64), return_counts=True)
        return LambdaGrid(points=points, weights=counts / counts.sum())


@dataclass(frozen=True)
class ValueDistribution:
    """Discrete distribution over good values (capacity mass per value)."""

    values: np.ndarray
    masses: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        masses = np.asarray(self.masses, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "masses", masses)
        if values.shape != masses.shape or values.ndim != 1:
            raise ConfigurationError("values and masses must be aligned 1-D arrays")
        if np.any(masses < 0) or abs(masses.sum() - 1.0) > 1e-10:
            raise ConfigurationError("masses must be nonnegative and sum to 1")

    def sorted_ascending(self) -> "ValueDistribution":
        order = np.argsort(self.values, kind="stable")
        return ValueDistribution(values=self.values[order], masses=self.masses[order])

    def mean(self) -> float:
        return float(self.values @ self.masses)


@dataclass(frozen=True)
class Thresholds:
    """Interior lambda cut points; cell s collects lambda in (t_{s-1}, t_s]."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if any(b < a for a, b in zip(vals, vals[1:])):
            raise ConfigurationError("thresholds must be nondecreasing")


def assign_cells(thresholds: np.ndarray, grid: LambdaGrid, num_signals: int) -> np.ndarray:
    """Cell index of every grid atom; atoms exactly on a threshold go low."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if len(thresholds) != num_signals - 1:
        raise ConfigurationError("need exactly n-1 thresholds for n signals")
    return np.searchsorted(thresholds, grid.points, side="left")


def build_x(thresholds: np.ndarray, grid: LambdaGrid, num_signals: int) -> np.ndarray:
    """Coupling between lambda atoms and signals implied by the thresholds."""
    cells = assign_cells(thresholds, grid, num_signals)
    x = np.zeros((grid.size, num_signals))
    x[np.arange(grid.size), cells] = grid.weights
    return x


def signal_masses(x: np.ndarray) -> np.ndarray:
    # exact (fsum) column sums: cell masses like 1/2 must come out bit-equal
    # to their rational values for the coarse-transport bookkeeping
    return np.array([math.fsum(col) for col in x.T])


def quantile_coupling(row_masses: np.ndarray, col_masses: np.ndarray) -> np.ndarray:
    """North-west-corner coupling of two mass vectors in their given orders."""
    total_r = row_masses.sum()
    total_c = col_masses.sum()
    if abs(total_r - total_c) > MARGINAL_TOL:
        raise ConfigurationError(f"mass mismatch: {total_r} vs {total_c}")
    out = np.zeros((len(row_masses), len(col_masses)))
    i = j = 0
    remaining_r = row_masses[0] if len(row_masses) else 0.0
    remaining_c = col_masses[0] if len(col_masses) else 0.0
    while i < len(row_masses) and j < len(col_masses):
        move = min(remaining_r, remaining_c)
        out[i, j] += move
        remaining_r -= move
        remaining_c -= move
        if remaining_r <= MARGINAL_TOL:
            i += 1
            if i < len(row_masses):
                remaining_r = row_masses[i]
        if remaining_c <= MARGINAL_TOL:
            j += 1
            if j < len(col_masses):
                remaining_c = col_masses[j]
    return out


def comonotone_couplings(
    masses: np.ndarray,
    course_dist: ValueDistribution,
    dorm_dist: ValueDistribution,
) -> tuple[np.ndarray, np.ndarray, ValueDistribution, ValueDistribution]:
    """Optimal couplings of signals to course and dorm tiers.

    Courses stack high signals against high values; dorms stack low signals
    against high values.  Returned couplings are indexed by ascending signal
    and ascending-value tiers of the (sorted) distributions, which are
    returned alongside.
    """
    courses = course_dist.sorted_ascending()
    dorms = dorm_dist.sorted_ascending()
    y = quantile_coupling(masses, courses.masses)
    z = quantile_coupling(masses[::-1], dorms.masses)[::-1]
    return y, z, courses, dorms


@dataclass(frozen=True)
class TransportPlan:
    """The three couplings of the separable transport problem."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    course_values: np.ndarray
    dorm_values: np.ndarray

    def check_marginals(
        self,
        grid: LambdaGrid,
        course_dist: ValueDistribution,
        dorm_dist: ValueDistribution,
        tol: float = MARGINAL_TOL,
    ) -> None:
        lam_marginal = self.x.sum(axis=1)
        if np.max(np.abs(lam_marginal - grid.weights)) > tol:
            raise ConfigurationError("lambda marginal violated")
        sig = self.x.sum(axis=0)
        for coupling, axis_name in ((self.y, "course"), (self.z, "dorm")):
            if np.max(np.abs(coupling.sum(axis=1) - sig)) > tol:
                raise ConfigurationError(f"signal marginal violated on the {axis_name} side")
        if np.max(np.abs(self.y.sum(axis=0) - course_dist.sorted_ascending().masses)) > tol:
            raise ConfigurationError("course marginal violated")
        if np.max(np.abs(self.z.sum(axis=0) - dorm_dist.sorted_ascending().masses)) > tol:
            raise ConfigurationError("dorm marginal violated")


def build_plan(
    thresholds: np.ndarray,
    grid: LambdaGrid,
    course_dist: ValueDistribution,
    dorm_dist: ValueDistribution,
    num_signals: int,
) -> TransportPlan:
    x = build_x(thresholds, grid, num_signals)
    y, z, courses, dorms = comonotone_couplings(signal_masses(x), course_dist, dorm_dist)
    plan = TransportPlan(
        x=x, y=y, z=z, course_values=courses.values, dorm_values=dorms.values
    )
    plan.check_marginals(grid, course_dist, dorm_dist)
    return plan


def _cell_sums(thresholds: np.ndarray, grid: LambdaGrid, num_signals: int):
    cells = assign_cells(thresholds, grid, num_signals)
    lam = grid.points
    w = grid.weights
    course_weight = np.bincount(cells, weights=w * lam / (1 + lam), minlength=num_signals)
    dorm_weight = np.bincount(cells, weights=w / (1 + lam), minlength=num_signals)
    masses = np.bincount(cells, weights=w, minlength=num_signals)
    return masses, course_weight, dorm_weight


def conditional_values(
    masses: np.ndarray,
    course_dist: ValueDistribution,
    dorm_dist: ValueDistribution,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-signal expected course and dorm value under the optimal couplings."""
    y, z, courses, dorms = comonotone_couplings(masses, course_dist, dorm_dist)
    safe = np.where(masses > 0, masses, 1.0)
    ev = np.where(masses > 0, y @ courses.values / safe, 0.0)
    ew = np.where(masses > 0, z @ dorms.values / safe, 0.0)
    return ev, ew


def welfare_objective(
    thresholds: np.ndarray,
    grid: LambdaGrid,
    course_dist: ValueDistribution,
    dorm_dist: ValueDistribution,
    num_signals: int | None = None,
) -> float:
    """Expected utility of the threshold plan (Monge form of the objective)."""
    thresholds = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    if num_signals is None:
        num_signals = len(thresholds) + 1
    masses, cw, dw = _cell_sums(thresholds, grid, num_signals)
    ev, ew = conditional_values(masses, course_dist, dorm_dist)
    return float(cw @ ev + dw @ ew)


def foc_residuals(
    thresholds: np.ndarray,
    grid: LambdaGrid,
    course_dist: ValueDistribution,
    dorm_dist: ValueDistribution,
) -> np.ndarray:
    """Indifference-gap of the boundary type between adjacent signal cells."""
    thresholds = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    n = len(thresholds) + 1
    masses, _, _ = _cell_sums(thresholds, grid, n)
    ev, ew = conditional_values(masses, course_dist, dorm_dist)
    lam = thresholds
    a = lam / (1 + lam)
    b = 1 / (1 + lam)
    return (a * ev[:-1] + b * ew[:-1]) - (a * ev[1:] + b * ew[1:])


@dataclass(frozen=True)
class SolveResult:
    thresholds: np.ndarray
    objective: float
    foc_residuals: np.ndarray
    converged: bool
    used_fallback: bool
    sweeps: int


def _quantile_init(grid: LambdaGrid, num_signals: int) -> np.ndarray:
    cum = np.cumsum(grid.weights)
    out = []
    for s in range(1, num_signals):
        idx = int(np.searchsorted(cum, s / num_signals))
        out.append(grid.points[min(idx, grid.size - 1)])
    return np.array(out)


def _coordinate_ascent(
    init: np.ndarray,
    grid: LambdaGrid,
    course_dist: ValueDistribution,
    dorm_dist: ValueDistribution,
    num_signals: int,
    max_sweeps: int,
) -> tuple[np.ndarray, float, int]:
    thresholds = init.astype(np.float64).copy()
    best = welfare_objective(thresholds, grid, course_dist, dorm_dist, num_signals)
    sweeps = 0
    lo_pt = grid.points[0]
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        improved = False
        for i in range(num_signals - 1):
            lo = thresholds[i - 1] if i > 0 else lo_pt - 1.0
            hi = thresholds[i + 1] if i + 1 < num_signals - 1 else grid.points[-1]
            candidates = [lo] + [p for p in grid.points if lo <= p <= hi] + [hi]
            for cand in candidates:
                trial = thresholds.copy()
                trial[i] = cand
                trial[: i + 1] = np.minimum(trial[: i + 1], cand)
                obj = welfare_objective(trial, grid, course_dist, dorm_dist, num_signals)
                if obj > best + 1e-15:
                    best = obj
                    thresholds = trial
                    improved = True
        if not improved:
            break
    return thresholds, best, sweeps


def _polish_focs(
    thresholds: np.ndarray,
    grid: LambdaGrid,
    course_dist: ValueDistribution,
    dorm_dist: ValueDistribution,
    num_signals: int,
) -> np.ndarray:
    """Move each threshold to the exact indifference point within its piece.

    The objective only depends on which atoms land in which cell, so any
    placement inside the same inter-atom gap is objective-equivalent; the
    indifference point is the one with zero first-order residual when it is
    interior to the gap.
    """
    out = thresholds.astype(np.float64).copy()
    masses, _, _ = _cell_sums(out, grid, num_signals)
    ev, ew = conditional_values(masses, course_dist, dorm_dist)
    cells = assign_cells(out, grid, num_signals)
    for i in range(num_signals - 1):
        in_cell = grid.points[cells <= i]
        above = grid.points[cells > i]
        gap_lo = in_cell[-1] if len(in_cell) else grid.points[0]
        gap_hi = above[0] if len(above) else grid.points[-1]
        dv = ev[i + 1] - ev[i]
        dw = ew[i] - ew[i + 1]
        if dv > 0 and dw > 0:
            star = dw / dv
            if gap_lo <= star < gap_hi or (gap_lo <= star <= gap_hi and len(above) == 0):
                out[i] = star
                continue
            out[i] = min(max(out[i], gap_lo), gap_hi)
    return out


def solve_thresholds(
    grid: LambdaGrid,
    num_signals: int,
    course_dist: ValueDistribution,
    dorm_dist: ValueDistribution,
    tol: float = 1e-8,
    max_sweeps: int = 50,
) -> SolveResult:
    """Find welfare-maximizing thresholds for an n-signal space.

    Primary method: coordinate ascent over atom assignments followed by
    first-order polishing.  When the lattice is small enough an exhaustive
    grid search acts as a fallback; disagreement beyond ``tol`` flips to the
    fallback answer and is reported.
    """
    if num_signals < 2:
        raise ConfigurationError("threshold solving needs at least 2 signals")
    inits = [_quantile_init(grid, num_signals)]
    shift = max(1, grid.size // (2 * num_signals))
    for delta in (-shift, shift):
        cum = np.cumsum(grid.weights)
        alt = []
        for s in range(1, num_signals):
            idx = int(np.searchsorted(cum, s / num_signals)) + delta
            alt.append(grid.points[min(max(idx, 0), grid.size - 1)])
        inits.append(np.sort(np.array(alt)))

    best_thresholds = None
    best_obj = -np.inf
    total_sweeps = 0
    for init in inits:
        thresholds, obj, sweeps = _coordinate_ascent(
            init, grid, course_dist, dorm_dist, num_signals, max_sweeps
        )
        total_sweeps += sweeps
        if obj > best_obj:
            best_obj = obj
            best_thresholds = thresholds

    used_fallback = False
    n_candidates = math.comb(grid.size + num_signals - 2, num_signals - 1)
    if n_candidates <= FALLBACK_BUDGET:
        fb_thresholds, fb_obj = grid_search_oracle(
            grid, num_signals, course_dist, dorm_dist, guard=FALLBACK_BUDGET
        )
        if fb_obj > best_obj + tol:
            best_obj = fb_obj
            best_thresholds = np.asarray(fb_thresholds, dtype=np.float64)
            used_fallback = True

    polished = _polish_focs(best_thresholds, grid, course_dist, dorm_dist, num_signals)
    final_obj = welfare_objective(polished, grid, course_dist, dorm_dist, num_signals)
    if final_obj + 1e-12 < best_obj:
        polished = best_thresholds
        final_obj = best_obj
    residuals = foc_residuals(polished, grid, course_dist, dorm_dist)
    converged = bool(np.all(np.abs(residuals) <= tol))
    return SolveResult(
        thresholds=polished,
        objective=final_obj,
        foc_residuals=residuals,
        converged=converged,
        used_fallback=used_fallback,
        sweeps=total_sweeps,
    )


def grid_search_oracle(
    grid: LambdaGrid,
    num_signals: int,
    course_dist: ValueDistribution,
    dorm_dist: ValueDistribution,
    guard: int = ORACLE_GUARD,
) -> tuple[np.ndarray, float]:
    """Exhaustive argmax of the objective over grid-point threshold vectors."""
    if num_signals < 2:
        return np.empty(0), welfare_objective(np.empty(0), grid, course_dist, dorm_dist, 1)
    count = math.comb(grid.size + num_signals - 2, num_signals - 1)
    if count > guard:
        raise GuardError(f"grid search would evaluate {count} candidates (guard {guard})")
    best = -np.inf
    best_thresholds = None
    for combo in itertools.combinations_with_replacement(grid.points, num_signals - 1):
        thresholds = np.array(combo)
        obj = welfare_objective(thresholds, grid, course_dist, dorm_dist, num_signals)
        if obj > best:
            best = obj
            best_thresholds = thresholds
    return best_thresholds, float(best)


def comonotone_optimality_check(
    signal_weights: np.ndarray, good_values: np.ndarray
) -> bool:
    """Verify the sorted coupling beats every permutation coupling.

    Both sides are treated as equal-mass atoms (guarded at 7); the objective
    is the supermodular product form, so the co-monotone arrangement must be
    maximal by the rearrangement inequality.
    """
    a = np.asarray(signal_weights, dtype=np.float64)
    v = np.asarray(good_values, dtype=np.float64)
    if len(a) != len(v):
        raise ConfigurationError("permutation check needs equally many atoms per side")
    if len(a) > PERMUTATION_GUARD:
        raise GuardError(f"permutation check guarded at {PERMUTATION_GUARD} atoms")
    sorted_obj = float(np.sort(a) @ np.sort(v))
    best = max(float(a @ v[list(perm)]) for perm in itertools.permutations(range(len(v))))
    return sorted_obj >= best - 1e-12


@dataclass(frozen=True)
class CrosscheckReport:
    """Simulated equilibrium welfare measured against the transport optimum."""

    optimum: float
    simulated_welfare: float
    simulated_se: float
    ratio: float
    within_upper_bound: bool
    psd_dominates_irsd: bool
    irsd_welfare: float
    signal_course_value: np.ndarray
    signal_dorm_value: np.ndarray
    profile: np.ndarray


def theorem2_crosscheck(
    spec,
    prefs,
    common_course_values: np.ndarray,
    common_dorm_values: np.ndarray,
    num_signals: int,
    learner_config=None,
    stats_draws: int = 400,
    seed: int = 0,
) -> CrosscheckReport:
    """Check a homogeneous single-course economy against the coarse optimum.

    Learns the mechanism's equilibrium, simulates welfare across tie-break
    draws, and verifies that (a) simulated aggregate welfare does not exceed
    the transport optimum beyond Monte-Carlo noise and (b) every student does
    at least as well as under independent RSD.  Preferences must be in the
    normalized lambda/(1+lambda) units produced by the homogeneous scenario
    generator so that utilities and the objective share a scale.
    """
    from .learning import LearnerConfig, learn_equilibrium, purify
    from .mechanisms import run_paired_sd
    from .market import TieBreakDraw
    from .rng import stream, substream_seed

    if spec.bundle_size != 1:
        raise ConfigurationError("the crosscheck requires single-course demand")
    if prefs.lam is None:
        raise ConfigurationError("the crosscheck requires relative-preference parameters")
    n = spec.num_students
    common_course_values = np.asarray(common_course_values, dtype=np.float64)
    common_dorm_values = np.asarray(common_dorm_values, dtype=np.float64)

    grid = LambdaGrid.from_samples(prefs.lam)
    course_dist = ValueDistribution(
        values=common_course_values,
        masses=np.asarray(spec.course_capacities, dtype=np.float64) / n,
    )
    dorm_dist = ValueDistribution(
        values=common_dorm_values,
        masses=np.asarray(spec.dorm_capacities, dtype=np.float64) / n,
    )
    if num_signals >= 2:
        optimum = solve_thresholds(grid, num_signals, course_dist, dorm_dist).objective
    else:
        optimum = welfare_objective(np.empty(0), grid, course_dist, dorm_dist, 1)

    if num_signals >= 2:
        config = learner_config if learner_config is not None else LearnerConfig()
        config = config.with_updates(seed=substream_seed(seed, "crosscheck-learn"))
        mixed, _ = learn_equilibrium(spec, prefs, num_signals, config)
        profile, _ = purify(mixed)
    else:
        profile = np.zeros(n, dtype=np.int64)

    irsd_profile = np.zeros(n, dtype=np.int64)
    psd_utils = np.empty((stats_draws, n))
    irsd_utils = np.empty((stats_draws, n))
    course_sum = np.zeros(num_signals)
    dorm_sum = np.zeros(num_signals)
    count = np.zeros(num_signals)
    for m in range(stats_draws):
        rng = stream(seed, "crosscheck-stats", m)
        tiebreak = TieBreakDraw(
            r_c=rng.permutation(n).astype(np.int64),
            r_d=rng.permutation(n).astype(np.int64),
        )
        allocation, _, _ = run_paired_sd(profile, tiebreak, spec, prefs)
        psd_utils[m] = prefs.utilities(allocation)
        assigned_courses = allocation.courses[:, 0]
        for s in range(num_signals):
            mask = profile == s
            if mask.any():
                course_sum[s] += common_course_values[assigned_courses[mask]].mean()
                housed = mask & (allocation.dorms >= 0)
                if housed.any():
                    dorm_sum[s] += common_dorm_values[allocation.dorms[housed]].mean()
                count[s] += 1
        irsd_alloc, _, _ = run_paired_sd(irsd_profile, tiebreak, spec, prefs)
        irsd_utils[m] = prefs.utilities(irsd_alloc)

    aggregate = psd_utils.mean(axis=1)
    simulated = float(aggregate.mean())
    se = float(aggregate.std(ddof=1) / np.sqrt(stats_draws))
    mean_psd = psd_utils.mean(axis=0)
    mean_irsd = irsd_utils.mean(axis=0)
    se_diff = np.sqrt(psd_utils.var(axis=0) + irsd_utils.var(axis=0)) / np.sqrt(stats_draws)
    dominates = bool(np.all(mean_psd >= mean_irsd - 3 * se_diff))
    safe_count = np.where(count > 0, count, 1.0)
    return CrosscheckReport(
        optimum=float(optimum),
        simulated_welfare=simulated,
        simulated_se=se,
        ratio=simulated / optimum if optimum != 0 else np.nan,
        within_upper_bound=simulated <= optimum + 3 * se,
        psd_dominates_irsd=dominates,
        irsd_welfare=float(irsd_utils.mean()),
        signal_course_value=course_sum / safe_count,
        signal_dorm_value=dorm_sum / safe_count,
        profile=profile,
    )


def summary_dict(
    thresholds: np.ndarray,
    grid: LambdaGrid,
    course_dist: ValueDistribution,
    dorm_dist: ValueDistribution,
    num_signals: int | None = None,
    residuals: np.ndarray | None = None,
) -> dict:
    """JSON-ready description of a threshold plan."""
    thresholds = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    if num_signals is None:
        num_signals = len(thresholds) + 1
    masses, _, _ = _cell_sums(thresholds, grid, num_signals)
    ev, ew = conditional_values(masses, course_dist, dorm_dist)
    if residuals is None:
        residuals = foc_residuals(thresholds, grid, course_dist, dorm_dist)
    return {
        "thresholds": [float(t) for t in thresholds],
        "signal_masses": [float(m) for m in masses],
        "expected_course_value": [float(x) for x in ev],
        "expected_dorm_value": [float(x) for x in ew],
        "objective": welfare_objective(thresholds, grid, course_dist, dorm_dist, num_signals),
        "foc_residuals": [float(r) for r in residuals],
        "zero_mass_signals": [int(s) for s in np.nonzero(masses == 0)[0]],
    }
