"""Scenario generation and configuration ingestion.

The randomized economy: N students each take up to four of C courses and
one of D dorms, with utilities

    u_i(C, d) = lambda_i * sum_{c in C} (v_c^i + 0.025 c) + gamma_i * (w_d^i + 0.1 d)

where lambda_i, gamma_i ~ U(0, 10) and the idiosyncratic v_c^i, w_d^i ~
U(0, 5); the sloped terms are a common quality component.  Capacities are a
uniformly random composition of total demand (N * bundle_size course seats,
N dorm beds), so markets are exactly balanced.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .learning import LearnerConfig
from .market import ConfigurationError, MarketSpec, PreferenceProfile
from .mechanisms import MechanismVariant
from .rng import stream

LAMBDA_HIGH = 10.0
IDIOSYNCRATIC_HIGH = 5.0
COURSE_SLOPE = 0.025
DORM_SLOPE = 0.1


def random_composition(total: int, bins: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random composition of ``total`` into ``bins`` parts, each >= 1."""
    if total < bins:
        raise ConfigurationError(f"cannot split {total} units into {bins} nonempty bins")
    if bins == 1:
        return np.array([total], dtype=np.int64)
    cuts = np.sort(rng.choice(total - 1, size=bins - 1, replace=False)) + 1
    edges = np.concatenate(([0], cuts, [total]))
    return np.diff(edges).astype(np.int64)


def random_partition(total: int, bins: int, rng: np.random.Generator) -> np.ndarray:
    """Random partition of ``total`` units into bins, each unit placed uniformly.

    This is the capacity law of the randomized scenarios: every seat/bed is
    assigned to a uniformly random good, so capacities concentrate near
    ``total/bins``. A minimum of one unit per bin is enforced by moving units
    from the largest bins (which at scale essentially never triggers).
    """
    if total < bins:
        raise ConfigurationError(f"cannot split {total} units into {bins} nonempty bins")
    out = rng.multinomial(total, np.full(bins, 1.0 / bins)).astype(np.int64)
    while (out == 0).any():
        out[int(np.argmax(out))] -= 1
        out[int(np.argmin(out))] += 1
    return out


def section5_scenario(
    seed: int,
    num_students: int = 1000,
    num_courses: int = 40,
    num_dorms: int = 10,
    bundle_size: int = 4,
    course_total: int | None = None,
    dorm_total: int | None = None,
) -> tuple[MarketSpec, PreferenceProfile]:
    """The randomized course/dorm economy with its stock parameterization."""
    n = num_students
    lam = stream(seed, "lambda").uniform(0.0, LAMBDA_HIGH, n)
    gam = stream(seed, "gamma").uniform(0.0, LAMBDA_HIGH, n)
    idio_c = stream(seed, "course-idio").uniform(0.0, IDIOSYNCRATIC_HIGH, (n, num_courses))
    idio_d = stream(seed, "dorm-idio").uniform(0.0, IDIOSYNCRATIC_HIGH, (n, num_dorms))
    common_c = COURSE_SLOPE * np.arange(num_courses)
    common_d = DORM_SLOPE * np.arange(num_dorms)
    prefs = PreferenceProfile(
        course_values=lam[:, None] * (idio_c + common_c),
        dorm_values=gam[:, None] * (idio_d + common_d),
        lam=lam,
        gam=gam,
    )
    caps_c = random_partition(
        course_total if course_total is not None else n * bundle_size,
        num_courses,
        stream(seed, "caps-courses"),
    )
    caps_d = random_partition(
        dorm_total if dorm_total is not None else n,
        num_dorms,
        stream(seed, "caps-dorms"),
    )
    spec = MarketSpec(
        course_capacities=tuple(int(c) for c in caps_c),
        dorm_capacities=tuple(int(d) for d in caps_d),
        bundle_size=bundle_size,
        num_students=n,
    )
    return spec, prefs


def homogeneous_scenario(
    seed: int,
    num_students: int,
    course_values: np.ndarray,
    dorm_values: np.ndarray,
    course_capacities: np.ndarray,
    dorm_capacities: np.ndarray,
    lam: np.ndarray | None = None,
    lambda_low: float = 0.1,
    lambda_high: float = 10.0,
) -> tuple[MarketSpec, PreferenceProfile]:
    """Common-values economy where students differ only in relative preference.

    Utilities take the normalized form lambda/(1+lambda) v(c) + 1/(1+lambda) w(d)
    with single-course demand, matching the transport problem's units.
    """
    n = num_students
    course_values = np.asarray(course_values, dtype=np.float64)
    dorm_values = np.asarray(dorm_values, dtype=np.float64)
    if lam is None:
        lam = stream(seed, "lambda").uniform(lambda_low, lambda_high, n)
    else:
        lam = np.asarray(lam, dtype=np.float64)
        if lam.shape != (n,):
            raise ConfigurationError("lambda vector does not match num_students")
    a = (lam / (1.0 + lam))[:, None]
    b = (1.0 / (1.0 + lam))[:, None]
    prefs = PreferenceProfile(
        course_values=a * course_values[None, :],
        dorm_values=b * dorm_values[None, :],
        lam=lam,
        gam=np.ones(n),
    )
    spec = MarketSpec(
        course_capacities=tuple(int(c) for c in course_capacities),
        dorm_capacities=tuple(int(d) for d in dorm_capacities),
        bundle_size=1,
        num_students=n,
    )
    return spec, prefs


def motivating_example() -> tuple[MarketSpec, PreferenceProfile]:
    """Two students, two courses, two dorms; one cares 10x more about courses.

    Student 0 values (c0, c1) at (0, 10) and (d0, d1) at (0, 1); student 1
    is the mirror image.  Signal 1 = "courses matter more".
    """
    spec = MarketSpec(
        course_capacities=(1, 1),
        dorm_capacities=(1, 1),
        bundle_size=1,
        num_students=2,
    )
    prefs = PreferenceProfile(
        course_values=np.array([[0.0, 10.0], [0.0, 1.0]]),
        dorm_values=np.array([[0.0, 1.0], [0.0, 10.0]]),
        lam=np.array([10.0, 0.1]),
        gam=np.array([1.0, 1.0]),
    )
    return spec, prefs


def hyper_competition_example(num_students: int = 3) -> tuple[MarketSpec, PreferenceProfile]:
    """One dorm so valuable that chasing it dominates everything else.

    Every student values the scarce dorm far above (1 + 1/capacity) times
    their largest utility spread over bundles without it, so the unique
    equilibrium is universal lowest-signal play.
    """
    n = num_students
    spec = MarketSpec(
        course_capacities=(max(n - 1, 1), 1),
        dorm_capacities=(n, 1),
        bundle_size=1,
        num_students=n,
    )
    course_values = np.tile(np.array([1.0, 2.0]), (n, 1))
    dorm_values = np.tile(np.array([0.0, 100.0]), (n, 1))
    return spec, PreferenceProfile(course_values=course_values, dorm_values=dorm_values)


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

_SCENARIO_KEYS = {
    "name",
    "seed",
    "num_students",
    "num_courses",
    "num_dorms",
    "bundle_size",
    "num_signals",
    "variant",
    "preferences",
    "capacities",
    "tiebreak_draws",
}
_PREF_KEYS = {
    "model",
    "course_values",
    "dorm_values",
    "lambda_low",
    "lambda_high",
    "lambdas",
    "gammas",
}
_CAP_KEYS = {"rule", "course_total", "dorm_total", "courses", "dorms"}
_LEARNER_KEYS = {"iterations", "draws_per_iteration", "eta", "counterfactual"}
_STATS_KEYS = {"draws"}


@dataclass(frozen=True)
class ScenarioConfig:
    """Resolved experiment configuration."""

    name: str
    seed: int
    num_students: int
    num_courses: int
    num_dorms: int
    bundle_size: int
    num_signals: int
    variant: MechanismVariant
    preference_model: str
    capacity_rule: str
    course_total: int | None
    dorm_total: int | None
    explicit_course_caps: tuple[int, ...] | None
    explicit_dorm_caps: tuple[int, ...] | None
    common_course_values: tuple[float, ...] | None
    common_dorm_values: tuple[float, ...] | None
    explicit_course_values: tuple[tuple[float, ...], ...] | None
    explicit_dorm_values: tuple[tuple[float, ...], ...] | None
    lambda_low: float
    lambda_high: float
    explicit_lambdas: tuple[float, ...] | None
    explicit_gammas: tuple[float, ...] | None
    learner: LearnerConfig
    stats_draws: int
    tiebreak_draws: int

    def fingerprint(self) -> str:
        payload = {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in sorted(self.as_dict().items())
        }
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def as_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "seed": self.seed,
            "num_students": self.num_students,
            "num_courses": self.num_courses,
            "num_dorms": self.num_dorms,
            "bundle_size": self.bundle_size,
            "num_signals": self.num_signals,
            "variant": self.variant.value,
            "preference_model": self.preference_model,
            "capacity_rule": self.capacity_rule,
            "course_total": self.course_total,
            "dorm_total": self.dorm_total,
            "explicit_course_caps": self.explicit_course_caps,
            "explicit_dorm_caps": self.explicit_dorm_caps,
            "common_course_values": self.common_course_values,
            "common_dorm_values": self.common_dorm_values,
            "explicit_course_values": self.explicit_course_values,
            "explicit_dorm_values": self.explicit_dorm_values,
            "lambda_low": self.lambda_low,
            "lambda_high": self.lambda_high,
            "explicit_lambdas": self.explicit_lambdas,
            "explicit_gammas": self.explicit_gammas,
            "learner_iterations": self.learner.iterations,
            "learner_draws": self.learner.draws_per_iteration,
            "learner_counterfactual": self.learner.counterfactual,
            "stats_draws": self.stats_draws,
            "tiebreak_draws": self.tiebreak_draws,
        }

    def build(self) -> tuple[MarketSpec, PreferenceProfile]:
        if self.preference_model == "section5":
            spec, prefs = section5_scenario(
                self.seed,
                self.num_students,
                self.num_courses,
                self.num_dorms,
                self.bundle_size,
                self.course_total,
                self.dorm_total,
            )
            if self.capacity_rule == "explicit":
                spec = MarketSpec(
                    course_capacities=self.explicit_course_caps,
                    dorm_capacities=self.explicit_dorm_caps,
                    bundle_size=self.bundle_size,
                    num_students=self.num_students,
                )
            elif self.capacity_rule == "composition":
                caps_c = random_composition(
                    self.course_total
                    if self.course_total is not None
                    else self.num_students * self.bundle_size,
                    self.num_courses,
                    stream(self.seed, "caps-courses"),
                )
                caps_d = random_composition(
                    self.dorm_total if self.dorm_total is not None else self.num_students,
                    self.num_dorms,
                    stream(self.seed, "caps-dorms"),
                )
                spec = MarketSpec(
                    course_capacities=tuple(int(c) for c in caps_c),
                    dorm_capacities=tuple(int(d) for d in caps_d),
                    bundle_size=self.bundle_size,
                    num_students=self.num_students,
                )
            return spec, prefs
        if self.capacity_rule == "explicit":
            caps_c = np.asarray(self.explicit_course_caps)
            caps_d = np.asarray(self.explicit_dorm_caps)
        else:
            split = random_partition if self.capacity_rule == "random" else random_composition
            caps_c = split(
                self.course_total if self.course_total is not None else self.num_students,
                self.num_courses,
                stream(self.seed, "caps-courses"),
            )
            caps_d = split(
                self.dorm_total if self.dorm_total is not None else self.num_students,
                self.num_dorms,
                stream(self.seed, "caps-dorms"),
            )
        if self.preference_model == "homogeneous":
            lam = (
                np.asarray(self.explicit_lambdas, dtype=np.float64)
                if self.explicit_lambdas is not None
                else None
            )
            return homogeneous_scenario(
                self.seed,
                self.num_students,
                np.asarray(self.common_course_values, dtype=np.float64),
                np.asarray(self.common_dorm_values, dtype=np.float64),
                caps_c,
                caps_d,
                lam=lam,
                lambda_low=self.lambda_low,
                lambda_high=self.lambda_high,
            )
        if self.preference_model == "explicit":
            spec = MarketSpec(
                course_capacities=tuple(int(c) for c in caps_c),
                dorm_capacities=tuple(int(d) for d in caps_d),
                bundle_size=self.bundle_size,
                num_students=self.num_students,
            )
            prefs = PreferenceProfile(
                course_values=np.asarray(self.explicit_course_values, dtype=np.float64),
                dorm_values=np.asarray(self.explicit_dorm_values, dtype=np.float64),
                lam=np.asarray(self.explicit_lambdas, dtype=np.float64)
                if self.explicit_lambdas is not None
                else None,
                gam=np.asarray(self.explicit_gammas, dtype=np.float64)
                if self.explicit_gammas is not None
                else None,
            )
            return spec, prefs
        raise ConfigurationError(f"unknown preference model {self.preference_model!r}")


def _reject_unknown(section: str, mapping: dict, allowed: set[str]) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{section}]: {sorted(unknown)}")


def parse_config(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a mapping")
    _reject_unknown("root", data, {"scenario", "learner", "stats"})
    scenario = data.get("scenario")
    if not isinstance(scenario, dict):
        raise ConfigurationError("missing [scenario] section")
    _reject_unknown("scenario", scenario, _SCENARIO_KEYS)
    prefs = scenario.get("preferences", {"model": "section5"})
    _reject_unknown("scenario.preferences", prefs, _PREF_KEYS)
    caps = scenario.get("capacities", {"rule": "random"})
    _reject_unknown("scenario.capacities", caps, _CAP_KEYS)
    learner = data.get("learner", {})
    _reject_unknown("learner", learner, _LEARNER_KEYS)
    stats = data.get("stats", {})
    _reject_unknown("stats", stats, _STATS_KEYS)

    def need_positive(section: dict, key: str, default: int | None = None, label: str = "scenario") -> int:
        value = section.get(key, default)
        if not isinstance(value, int) or value < 1:
            raise ConfigurationError(f"{label}.{key} must be a positive integer")
        return value

    variant_name = scenario.get("variant", "paired_sd")
    try:
        variant = MechanismVariant(variant_name)
    except ValueError:
        raise ConfigurationError(f"scenario.variant: unknown variant {variant_name!r}")

    model = prefs.get("model", "section5")
    if model not in ("section5", "homogeneous", "explicit"):
        raise ConfigurationError(f"scenario.preferences.model: unknown model {model!r}")

    rule = caps.get("rule", "random")
    if rule not in ("random", "composition", "explicit"):
        raise ConfigurationError(f"scenario.capacities.rule: unknown rule {rule!r}")

    num_courses = need_positive(scenario, "num_courses", 40)
    num_dorms = need_positive(scenario, "num_dorms", 10)
    explicit_courses = caps.get("courses")
    explicit_dorms = caps.get("dorms")
    if rule == "explicit":
        if explicit_courses is None or explicit_dorms is None:
            raise ConfigurationError("scenario.capacities: explicit rule needs courses and dorms lists")
        if len(explicit_courses) != num_courses or len(explicit_dorms) != num_dorms:
            raise ConfigurationError("scenario.capacities: explicit list lengths disagree with counts")
        if any((not isinstance(c, int)) or c < 0 for c in list(explicit_courses) + list(explicit_dorms)):
            raise ConfigurationError("scenario.capacities: capacities must be nonnegative integers")

    common_course_values = None
    common_dorm_values = None
    explicit_course_values = None
    explicit_dorm_values = None
    if model == "homogeneous":
        common_course_values = prefs.get("course_values")
        common_dorm_values = prefs.get("dorm_values")
        if common_course_values is None or common_dorm_values is None:
            raise ConfigurationError("scenario.preferences: homogeneous model needs course_values and dorm_values")
        if len(common_course_values) != num_courses or len(common_dorm_values) != num_dorms:
            raise ConfigurationError("scenario.preferences: common value lengths disagree with counts")
    elif model == "explicit":
        explicit_course_values = prefs.get("course_values")
        explicit_dorm_values = prefs.get("dorm_values")
        if explicit_course_values is None or explicit_dorm_values is None:
            raise ConfigurationError("scenario.preferences: explicit model needs per-student value tables")

    learner_cfg = LearnerConfig(
        iterations=need_positive(learner, "iterations", 200, label="learner"),
        draws_per_iteration=need_positive(learner, "draws_per_iteration", 200, label="learner"),
        eta=learner.get("eta"),
        seed=need_positive(scenario, "seed", 1),
        counterfactual=learner.get("counterfactual", "auto"),
    )

    return ScenarioConfig(
        name=str(scenario.get("name", "scenario")),
        seed=need_positive(scenario, "seed", 1),
        num_students=need_positive(scenario, "num_students"),
        num_courses=num_courses,
        num_dorms=num_dorms,
        bundle_size=need_positive(scenario, "bundle_size", 4),
        num_signals=need_positive(scenario, "num_signals", 10),
        variant=variant,
        preference_model=model,
        capacity_rule=rule,
        course_total=caps.get("course_total"),
        dorm_total=caps.get("dorm_total"),
        explicit_course_caps=tuple(explicit_courses) if explicit_courses else None,
        explicit_dorm_caps=tuple(explicit_dorms) if explicit_dorms else None,
        common_course_values=tuple(common_course_values) if common_course_values else None,
        common_dorm_values=tuple(common_dorm_values) if common_dorm_values else None,
        explicit_course_values=tuple(tuple(row) for row in explicit_course_values)
        if explicit_course_values
        else None,
        explicit_dorm_values=tuple(tuple(row) for row in explicit_dorm_values)
        if explicit_dorm_values
        else None,
        lambda_low=float(prefs.get("lambda_low", 0.1)),
        lambda_high=float(prefs.get("lambda_high", 10.0)),
        explicit_lambdas=tuple(prefs["lambdas"]) if prefs.get("lambdas") else None,
        explicit_gammas=tuple(prefs["gammas"]) if prefs.get("gammas") else None,
        learner=learner_cfg,
        stats_draws=need_positive(stats, "draws", 1000, label="stats"),
        tiebreak_draws=need_positive(scenario, "tiebreak_draws", 200),
    )


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file is not valid YAML: {exc}")
    return parse_config(data)
