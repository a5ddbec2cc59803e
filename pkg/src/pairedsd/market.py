"""Domain types and the deterministic serial-dictatorship engine.

A market instance is a set of courses and dorms with integer capacities.
Students pick in some order; each takes their favorite available bundle of
courses (up to ``bundle_size``) or their favorite available dorm.  The
engine also records, for every good, the pick position at which it filled,
which downstream modules convert into normalized run-out times.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ConfigurationError(ValueError):
    """Raised when inputs disagree about population or market sizes."""


class GuardError(RuntimeError):
    """Raised when an exhaustive oracle is asked for an instance above its size guard."""


@dataclass(frozen=True)
class MarketSpec:
    """Capacities for both markets plus the per-student course limit.

    Courses and dorms are identified by their index (0-based), which keeps
    ids unique by construction.
    """

    course_capacities: tuple[int, ...]
    dorm_capacities: tuple[int, ...]
    bundle_size: int
    num_students: int

    def __post_init__(self) -> None:
        if self.bundle_size < 1:
            raise ConfigurationError("bundle_size must be positive")
        if self.num_students < 1:
            raise ConfigurationError("num_students must be positive")
        if any(c < 0 for c in self.course_capacities):
            raise ConfigurationError("course capacities must be nonnegative")
        if any(d < 0 for d in self.dorm_capacities):
            raise ConfigurationError("dorm capacities must be nonnegative")

    @property
    def num_courses(self) -> int:
        return len(self.course_capacities)

    @property
    def num_dorms(self) -> int:
        return len(self.dorm_capacities)


class PreferenceProfile:
    """Additive per-student values over courses and dorms.

    Bundle utility is additive: ``u_i(C, d) = sum_{c in C} v_i(c) + w_i(d)``.
    ``lam``/``gam`` carry the relative-preference parameters used by the
    randomized scenarios; they are optional and purely descriptive here.
    """

    def __init__(
        self,
        course_values: np.ndarray,
        dorm_values: np.ndarray,
        lam: np.ndarray | None = None,
        gam: np.ndarray | None = None,
    ) -> None:
        course_values = np.asarray(course_values, dtype=np.float64)
        dorm_values = np.asarray(dorm_values, dtype=np.float64)
        if course_values.ndim != 2 or dorm_values.ndim != 2:
            raise ConfigurationError("value tables must be 2-D (students x goods)")
        if course_values.shape[0] != dorm_values.shape[0]:
            raise ConfigurationError("course and dorm tables disagree on student count")
        if not (np.isfinite(course_values).all() and np.isfinite(dorm_values).all()):
            raise ConfigurationError("preference values must be finite")
        self.course_values = course_values
        self.dorm_values = dorm_values
        self.lam = None if lam is None else np.asarray(lam, dtype=np.float64)
        self.gam = None if gam is None else np.asarray(gam, dtype=np.float64)
        self._course_order: np.ndarray | None = None
        self._dorm_order: np.ndarray | None = None

    @property
    def num_students(self) -> int:
        return self.course_values.shape[0]

    @property
    def num_courses(self) -> int:
        return self.course_values.shape[1]

    @property
    def num_dorms(self) -> int:
        return self.dorm_values.shape[1]

    def course_order(self) -> np.ndarray:
        """Per-student course ids sorted by value descending, ties to lower id."""
        if self._course_order is None:
            self._course_order = _preference_order(self.course_values)
        return self._course_order

    def dorm_order(self) -> np.ndarray:
        if self._dorm_order is None:
            self._dorm_order = _preference_order(self.dorm_values)
        return self._dorm_order

    def utilities(self, allocation: "Allocation") -> np.ndarray:
        """Realized utility of every student under an allocation."""
        n = self.num_students
        if allocation.courses.shape[0] != n:
            raise ConfigurationError("allocation and preferences disagree on student count")
        picked = allocation.courses
        mask = picked >= 0
        vals = np.where(mask, np.take_along_axis(self.course_values, np.where(mask, picked, 0), axis=1), 0.0)
        total = vals.sum(axis=1)
        housed = allocation.dorms >= 0
        total[housed] += self.dorm_values[np.arange(n)[housed], allocation.dorms[housed]]
        return total


def _preference_order(values: np.ndarray) -> np.ndarray:
    n, m = values.shape
    ids = np.broadcast_to(np.arange(m), (n, m))
    return np.lexsort((ids, -values), axis=1).astype(np.int32)


@dataclass(frozen=True)
class SignalSpace:
    """Ordered signals {0, ..., size-1}; size 1 degenerates to independent RSD."""

    size: int

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ConfigurationError("signal space must have at least one signal")

    @property
    def signals(self) -> range:
        return range(self.size)


@dataclass(frozen=True)
class TieBreakDraw:
    """A pair of rank permutations; within a signal, higher rank picks first."""

    r_c: np.ndarray
    r_d: np.ndarray

    def __post_init__(self) -> None:
        for r in (self.r_c, self.r_d):
            arr = np.asarray(r)
            if sorted(arr.tolist()) != list(range(arr.shape[0])):
                raise ConfigurationError("tie-break ranks must be a permutation of 0..N-1")
        if self.r_c.shape != self.r_d.shape:
            raise ConfigurationError("tie-break permutations disagree on student count")


def draw_tiebreak(rng: np.random.Generator, num_students: int) -> TieBreakDraw:
    return TieBreakDraw(
        r_c=rng.permutation(num_students).astype(np.int64),
        r_d=rng.permutation(num_students).astype(np.int64),
    )


# Sentinel pick position for a good that never fills: one past the last pick,
# so its normalized fill time lands strictly above 1.
def never_position(num_students: int) -> int:
    return num_students + 1


@dataclass(frozen=True)
class Allocation:
    """Joint outcome: per-student course bundle (canonical form) and dorm.

    ``courses`` is an (N, bundle_size) int array whose rows hold the picked
    ids sorted ascending followed by -1 padding; ``dorms`` holds -1 for an
    unhoused student.  Canonical form makes equality and hashing cheap.
    """

    courses: np.ndarray
    dorms: np.ndarray

    def key(self) -> bytes:
        return self.courses.tobytes() + self.dorms.tobytes()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Allocation):
            return NotImplemented
        return np.array_equal(self.courses, other.courses) and np.array_equal(self.dorms, other.dorms)


def canonical_bundles(rows: Sequence[Sequence[int]], bundle_size: int) -> np.ndarray:
    out = np.full((len(rows), bundle_size), -1, dtype=np.int32)
    for i, row in enumerate(rows):
        picked = sorted(row)
        out[i, : len(picked)] = picked
    return out


def order_for_courses(signals: np.ndarray, r_c: np.ndarray) -> np.ndarray:
    """Pick order for the course market: signal descending, rank descending.

    The relative order of two students depends only on their own signals and
    ranks, which is what makes counterfactual positions well defined.
    """
    signals = np.asarray(signals)
    r_c = np.asarray(r_c)
    if signals.shape != r_c.shape:
        raise ConfigurationError("signals and tie-break ranks disagree on student count")
    return np.lexsort((-r_c, -signals))


def order_for_dorms(signals: np.ndarray, r_d: np.ndarray) -> np.ndarray:
    """Pick order for the dorm market: signal ascending, rank descending."""
    signals = np.asarray(signals)
    r_d = np.asarray(r_d)
    if signals.shape != r_d.shape:
        raise ConfigurationError("signals and tie-break ranks disagree on student count")
    return np.lexsort((-r_d, signals))


def best_bundle(available: Sequence[int], values: np.ndarray, k: int) -> list[int]:
    """Top ``min(k, |available|)`` courses by value, ties broken by lowest id.

    An empty available set yields an empty bundle; callers treat larger
    bundles as weakly better, which is exact whenever values are positive.
    """
    ranked = sorted(available, key=lambda c: (-values[c], c))
    return ranked[: min(k, len(ranked))]


@dataclass(frozen=True)
class RunOutTrace:
    """Pick position at which each good filled (``num_students + 1`` = never)."""

    fill_position: np.ndarray
    num_students: int

    def fill_times(self) -> np.ndarray:
        return self.fill_position / self.num_students

    def filled(self) -> np.ndarray:
        return self.fill_position <= self.num_students


Chooser = Callable[[list[int], int], Sequence[int]]


def run_sd(
    market: str,
    ordering: np.ndarray,
    spec: MarketSpec,
    prefs: PreferenceProfile,
    chooser: Chooser | None = None,
) -> tuple[np.ndarray, RunOutTrace]:
    """Run serial dictatorship in one market along ``ordering``.

    Returns the per-student assignment (courses: canonical (N, k) bundle
    rows; dorms: (N,) ids with -1 for none) together with the run-out trace.
    ``chooser`` overrides the additive pick rule; it receives the available
    ids and the student index and must return a feasible pick.
    """
    n = spec.num_students
    if len(ordering) != n or prefs.num_students != n:
        raise ConfigurationError("ordering, spec and preferences disagree on student count")
    if market == "courses":
        caps = np.array(spec.course_capacities, dtype=np.int64)
        values = prefs.course_values
        k = spec.bundle_size
    elif market == "dorms":
        caps = np.array(spec.dorm_capacities, dtype=np.int64)
        values = prefs.dorm_values
        k = 1
    else:
        raise ConfigurationError(f"unknown market {market!r}")

    remaining = caps.copy()
    fill = np.where(caps == 0, 0, never_position(n)).astype(np.int64)
    picks: list[list[int]] = [[] for _ in range(n)]
    for position, student in enumerate(ordering, start=1):
        available = [int(g) for g in np.nonzero(remaining > 0)[0]]
        if not available:
            continue
        if chooser is not None:
            bundle = list(chooser(available, int(student)))
        else:
            bundle = best_bundle(available, values[student], k)
        if len(bundle) > k or len(set(bundle)) != len(bundle):
            raise ConfigurationError("chooser returned an infeasible bundle")
        for g in bundle:
            if remaining[g] <= 0:
                raise ConfigurationError("chooser picked an exhausted good")
            remaining[g] -= 1
            if remaining[g] == 0:
                fill[g] = position
        picks[int(student)] = sorted(bundle)

    trace = RunOutTrace(fill_position=fill, num_students=n)
    if market == "courses":
        return canonical_bundles(picks, spec.bundle_size), trace
    dorms = np.full(n, -1, dtype=np.int32)
    for i, row in enumerate(picks):
        if row:
            dorms[i] = row[0]
    return dorms, trace


def signal_cutoffs(signals: np.ndarray, num_signals: int) -> np.ndarray:
    """Cutoff times t_s = fraction of students with signal >= s, s = 0..S."""
    signals = np.asarray(signals)
    n = signals.shape[0]
    counts = np.bincount(signals, minlength=num_signals)
    above = np.concatenate(([n], n - np.cumsum(counts)))
    return above / n


@dataclass(frozen=True)
class RunOutTimes:
    """Normalized fill times plus the signal-class boundary times.

    ``boundaries`` are the cumulative class masses in the market's own pick
    order: {t_s} for courses (signal descending) and {1 - t_s} for dorms
    (signal ascending).  At a deterministic equilibrium every filled good's
    time lies on a boundary.
    """

    fill_times: np.ndarray
    cutoffs: np.ndarray
    boundaries: np.ndarray


def run_out_times(
    trace: RunOutTrace,
    signals: np.ndarray,
    num_signals: int,
    market: str = "courses",
) -> RunOutTimes:
    cutoffs = signal_cutoffs(signals, num_signals)
    if market == "courses":
        boundaries = np.sort(cutoffs)
    elif market == "dorms":
        boundaries = np.sort(1.0 - cutoffs)
    else:
        raise ConfigurationError(f"unknown market {market!r}")
    return RunOutTimes(fill_times=trace.fill_times(), cutoffs=cutoffs, boundaries=boundaries)
