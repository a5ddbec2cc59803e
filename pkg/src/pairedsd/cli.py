"""Command-line interface: learn, simulate, bruteforce, transport, report.

Exit codes: 0 on success, 1 on configuration errors, 2 on oracle guard
violations.  Partially written outputs are removed on failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .learning import brute_force_equilibria, learn_equilibrium, purify
from .market import ConfigurationError, GuardError, TieBreakDraw
from .mechanisms import MechanismVariant, heuristic_signals, run_tiebreak_first
from .rng import stream, substream_seed
from .scenarios import ScenarioConfig, load_config
from .transport import (
    LambdaGrid,
    ValueDistribution,
    solve_thresholds,
    summary_dict,
)
from .welfare import (
    StudentStats,
    compare,
    determinism_check,
    outcome_stats,
    write_comparison_csv,
    write_student_stats_csv,
)


class _OutputTracker:
    """Removes partially written outputs when a command fails."""

    def __init__(self) -> None:
        self.paths: list[Path] = []

    def register(self, path: Path) -> Path:
        self.paths.append(path)
        return path

    def cleanup(self) -> None:
        for path in self.paths:
            path.unlink(missing_ok=True)


def _apply_overrides(config: ScenarioConfig, args: argparse.Namespace) -> ScenarioConfig:
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
        updates["learner"] = config.learner.with_updates(seed=args.seed)
    if args.draws is not None:
        updates["stats_draws"] = args.draws
    if getattr(args, "exact_counterfactuals", False):
        updates["learner"] = updates.get("learner", config.learner).with_updates(
            counterfactual="exact"
        )
    if updates:
        from dataclasses import replace

        config = replace(config, **updates)
    return config


def _write_mixed_profile(path: Path, mixed: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id"] + [f"p{s}" for s in range(mixed.shape[1])])
        for i, row in enumerate(mixed):
            writer.writerow([i] + [f"{p:.12g}" for p in row])


def _read_mixed_profile(path: Path) -> np.ndarray:
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(x) for x in row[1:]] for row in reader]
    return np.array(rows)


def _read_stats(path: Path) -> StudentStats:
    with open(path) as fh:
        reader = csv.DictReader(fh)
        mean, std = [], []
        for row in reader:
            mean.append(float(row["mean_utility"]))
            std.append(float(row["std_utility"]))
    return StudentStats(mean=np.array(mean), std=np.array(std), samples=0)


def cmd_learn(args: argparse.Namespace, out: _OutputTracker) -> int:
    config = _apply_overrides(load_config(args.config), args)
    spec, prefs = config.build()
    cfg = config.learner.with_updates(
        seed=substream_seed(config.seed, "learn", config.num_signals),
        threads=args.threads,
    )
    mixed, trace = learn_equilibrium(spec, prefs, config.num_signals, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_mixed_profile(out.register(out_dir / "profile.csv"), mixed)
    trace.write_csv(out.register(out_dir / "regret.csv"))
    pure, stats = purify(mixed)
    payload = {
        "fingerprint": config.fingerprint(),
        "frac_top_signal_ge_0.9": stats.frac_above_09,
        "frac_top_signal_ge_1m1e9": stats.frac_pure,
        "final_total_regret": float(trace.total_regret[-1]),
    }
    with open(out.register(out_dir / "learn_summary.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    return 0


def cmd_simulate(args: argparse.Namespace, out: _OutputTracker) -> int:
    config = _apply_overrides(load_config(args.config), args)
    spec, prefs = config.build()
    n = spec.num_students
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def stats_for(signals: np.ndarray) -> StudentStats:
        return outcome_stats(
            signals,
            spec,
            prefs,
            config.stats_draws,
            seed=substream_seed(config.seed, "stats"),
            exact=args.exact,
        )

    variant = config.variant
    signals: np.ndarray | None = None
    if variant is MechanismVariant.INDEPENDENT_RSD:
        signals = np.zeros(n, dtype=np.int64)
        stats = stats_for(signals)
    elif variant is MechanismVariant.PAIRED_SD_HEURISTIC:
        signals = heuristic_signals(prefs, config.num_signals)
        stats = stats_for(signals)
    elif variant is MechanismVariant.PAIRED_SD_TIEBREAK_FIRST:
        draws = []
        for d in range(config.tiebreak_draws):
            rng = stream(config.seed, "tbf-draw", d)
            draws.append(
                TieBreakDraw(
                    r_c=rng.permutation(n).astype(np.int64),
                    r_d=rng.permutation(n).astype(np.int64),
                )
            )
        cfg = config.learner.with_updates(seed=substream_seed(config.seed, "tbf-learn"))
        outcomes = run_tiebreak_first(spec, prefs, config.num_signals, cfg, draws)
        utilities = np.stack([prefs.utilities(a) for _, a in outcomes])
        stats = StudentStats(
            mean=utilities.mean(axis=0), std=utilities.std(axis=0), samples=len(draws)
        )
    else:
        if args.profile is None:
            raise ConfigurationError("variant paired_sd requires --profile from a learn run")
        mixed = _read_mixed_profile(Path(args.profile))
        if mixed.shape != (n, config.num_signals):
            raise ConfigurationError("profile file does not match the scenario dimensions")
        signals, _ = purify(mixed)
        stats = stats_for(signals)

    write_student_stats_csv(out.register(out_dir / args.stats_name), stats, prefs, signals)
    if args.determinism and signals is not None:
        det = determinism_check(
            signals, spec, prefs, min(config.stats_draws, 200), seed=substream_seed(config.seed, "det")
        )
        with open(out.register(out_dir / "determinism.json"), "w") as fh:
            json.dump(
                {
                    "is_deterministic": det.is_deterministic,
                    "n_deterministic_students": det.num_deterministic_students,
                    "fill_times_on_cutoffs": det.fill_times_on_cutoffs,
                },
                fh,
                indent=2,
            )
    return 0


def cmd_bruteforce(args: argparse.Namespace, out: _OutputTracker) -> int:
    config = _apply_overrides(load_config(args.config), args)
    spec, prefs = config.build()
    equilibria = brute_force_equilibria(spec, prefs, config.num_signals)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "fingerprint": config.fingerprint(),
        "num_profiles_checked": config.num_signals**spec.num_students,
        "equilibria": [
            {"profile": list(profile), "payoffs": [float(x) for x in payoffs]}
            for profile, payoffs in equilibria
        ],
    }
    with open(out.register(out_dir / "equilibria.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    return 0


def cmd_transport(args: argparse.Namespace, out: _OutputTracker) -> int:
    config = _apply_overrides(load_config(args.config), args)
    if config.preference_model != "homogeneous":
        raise ConfigurationError("transport solving requires the homogeneous preference model")
    spec, prefs = config.build()
    grid = LambdaGrid.from_samples(prefs.lam)
    n_total = spec.num_students
    course_dist = ValueDistribution(
        values=np.asarray(config.common_course_values, dtype=np.float64),
        masses=np.asarray(spec.course_capacities, dtype=np.float64) / n_total,
    )
    dorm_dist = ValueDistribution(
        values=np.asarray(config.common_dorm_values, dtype=np.float64),
        masses=np.asarray(spec.dorm_capacities, dtype=np.float64) / n_total,
    )
    result = solve_thresholds(grid, config.num_signals, course_dist, dorm_dist)
    payload = summary_dict(
        result.thresholds,
        grid,
        course_dist,
        dorm_dist,
        config.num_signals,
        residuals=result.foc_residuals,
    )
    payload["fingerprint"] = config.fingerprint()
    payload["converged"] = result.converged
    payload["used_fallback"] = result.used_fallback
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out.register(out_dir / "transport.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    return 0


def cmd_report(args: argparse.Namespace, out: _OutputTracker) -> int:
    config = _apply_overrides(load_config(args.config), args)
    stats_new = _read_stats(Path(args.new))
    stats_base = _read_stats(Path(args.base))
    report = compare(stats_new, stats_base)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_comparison_csv(out.register(out_dir / "comparison.csv"), report)

    final_regret = None
    if args.regret:
        with open(args.regret) as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            final_regret = float(rows[-1]["total_regret"])
    n_det = None
    if args.determinism_file:
        with open(args.determinism_file) as fh:
            n_det = json.load(fh).get("n_deterministic_students")

    summary = {
        "n_students": report.num_students,
        "frac_mean_improved": report.frac_mean_improved,
        "mean_pct_mean_change": report.mean_pct_mean_change,
        "frac_std_reduced": report.frac_std_reduced,
        "mean_pct_std_change": report.mean_pct_std_change,
        "n_deterministic_students": n_det,
        "final_total_regret": final_regret,
        "fingerprint": config.fingerprint(),
    }
    with open(out.register(out_dir / "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairedsd", description="Paired serial dictatorship simulation laboratory"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="scenario YAML file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--draws", type=int, default=None, help="override stats draw count")

    learn = sub.add_parser("learn", help="learn an equilibrium profile")
    common(learn)
    learn.add_argument("--exact-counterfactuals", action="store_true")
    learn.set_defaults(func=cmd_learn)

    simulate = sub.add_parser("simulate", help="evaluate welfare statistics")
    common(simulate)
    simulate.add_argument("--profile", default=None, help="mixed profile CSV from a learn run")
    simulate.add_argument("--stats-name", default="stats.csv")
    simulate.add_argument("--determinism", action="store_true")
    simulate.add_argument("--exact", action="store_true", help="enumerate tie-breaks exactly")
    simulate.set_defaults(func=cmd_simulate)

    brute = sub.add_parser("bruteforce", help="enumerate exact pure Nash equilibria")
    common(brute)
    brute.set_defaults(func=cmd_bruteforce)

    transport = sub.add_parser("transport", help="solve the coarse-transport optimum")
    common(transport)
    transport.set_defaults(func=cmd_transport)

    report = sub.add_parser("report", help="compare two stats files into a summary")
    common(report)
    report.add_argument("--new", required=True, help="stats CSV of the candidate mechanism")
    report.add_argument("--base", required=True, help="stats CSV of the baseline mechanism")
    report.add_argument("--regret", default=None, help="regret CSV from the learn step")
    report.add_argument("--determinism-file", default=None)
    report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    tracker = _OutputTracker()
    try:
        return args.func(args, tracker)
    except ConfigurationError as exc:
        tracker.cleanup()
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except GuardError as exc:
        tracker.cleanup()
        print(f"guard violation: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
