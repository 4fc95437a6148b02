#!/usr/bin/env python3
"""
CLI entry point for markov-tpt.

Usage:
    # Committors of a chain specification
    markov-tpt committor --config chains/gambler.json --out runs/gambler

    # All reactive statistics plus the conservation report
    markov-tpt stats --config experiments/triple_well.json --format csv

    # Estimate an Ulam chain and write it as a chain specification
    markov-tpt ulam-build --config experiments/triple_well.json --seed 7
"""

import argparse
import logging
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import scipy
from scipy.stats import linregress

from markov_tpt import __version__
from markov_tpt.chains import (
    FiniteTimeChain,
    PeriodicChain,
    StationaryChain,
    densities_for,
    ensure_valid,
    stationary_distribution,
)
from markov_tpt.committors import solve, solve_stationary, window_committors
from markov_tpt.concurrency import GENERATOR_ID
from markov_tpt.config import Tolerances, get_log_level, get_tolerances
from markov_tpt.errors import OracleFailure, PreconditionError, TPTError, ValidationError
from markov_tpt.experiment import ExperimentConfig, build_chain, load_config
from markov_tpt.formats import (
    fmt,
    write_chain,
    write_committors,
    write_stats,
    write_trajectories,
    write_vector_field,
)
from markov_tpt.oracle import (
    DIRECTIONS,
    MAX_PATH_PREFIXES,
    enumerate_committor,
    enumerate_paths,
    ensemble_rate_estimate,
    ergodic_estimates,
    path_prefix_bound,
    simulate,
    z_score,
)
from markov_tpt.reactive import check_conservation, statistics_from
from markov_tpt.responses import dumps, make_error, make_response
from markov_tpt.ulam import channel_currents, circulation_forcing, current_vector_field

logger = logging.getLogger(__name__)

EPILOG = """
Examples:
  # Stationary committors of a 4-state chain
  markov-tpt committor --config gambler.json --out runs/gambler

  # Finite-window statistics as CSV, looser committor residual
  markov-tpt stats --config finite.json --format csv --tolerance committor_residual=1e-9

  # Convergence of window committors towards the stationary ones
  markov-tpt converge --config toy.json --windows 1,3,5,9,17,33

  # Cross-check solvers against enumeration and simulation
  markov-tpt validate --config toy.json --seed 3

Environment Variables:
  TPT_LOG_LEVEL        Log level when --log-level is not given (default: WARNING)
  TPT_WORKERS          Worker threads for Ulam sampling and ensembles
                       (default: min(8, cpu count), clamped to 1..64)
  TPT_TOL_<NAME>       Override a tolerance, e.g. TPT_TOL_COMMITTOR_RESIDUAL=1e-9

Exit Codes:
  0  success
  2  validation error or unmet precondition
  3  solver failure
  4  oracle or invariant check failed
"""


# =============================================================================
# Shared plumbing
# =============================================================================


class Run:
    """Everything a subcommand needs: config, tolerances, seed and output directory."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config: ExperimentConfig = load_config(args.config)
        self.tolerances: Tolerances = get_tolerances(self.config.tolerances).with_overrides(
            _parse_tolerances(args.tolerance)
        )
        self.seed: int = args.seed if args.seed is not None else self.config.seed
        self.config.seed = self.seed
        if args.set_radius is not None:
            self.config.set_radius = args.set_radius
        self.out: Path = Path(args.out) if args.out else (self.config.out or Path("tpt-out"))
        self.out.mkdir(parents=True, exist_ok=True)
        self.residuals: Dict[str, Any] = {}

    def chain(self):
        document = build_chain(self.config, tolerances=self.tolerances, workers=self.args.workers)
        ensure_valid(document.spec, document.sets, tolerances=self.tolerances)
        return document

    def metadata(self, command: str, **extra: Any) -> Dict[str, Any]:
        data = {
            "command": command,
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "seed": self.seed,
            "generator": GENERATOR_ID,
            "config": str(self.args.config),
            "config_hash": self.config.config_hash,
            "set_radius": self.config.set_radius,
            "tolerances": self.tolerances.to_dict(),
            "residuals": self.residuals,
            "created": datetime.now(timezone.utc),
        }
        data.update(extra)
        return data

    def finish(self, command: str, hint: str, **extra: Any) -> None:
        path = self.out / "run.json"
        path.write_text(make_response(self.metadata(command, **extra), hint))
        logger.info("Wrote %s", path)


def _parse_tolerances(items: Optional[List[str]]) -> Dict[str, str]:
    overrides = {}
    for item in items or []:
        name, sep, value = item.partition("=")
        if not sep or not name.strip():
            raise ValidationError(f"--tolerance expects NAME=VALUE, got {item!r}.")
        overrides[name.strip()] = value.strip()
    return overrides


def _write_committor_json(path: Path, committors) -> None:
    path.write_text(
        dumps(
            {
                "regime": committors.regime,
                "slices": [
                    {"slice": k, "q_plus": q_plus, "q_minus": q_minus}
                    for k, (q_plus, q_minus) in enumerate(
                        zip(committors.forward, committors.backward)
                    )
                ],
            }
        )
    )


def _write_committors(run: Run, committors) -> Path:
    if run.args.format == "json":
        path = run.out / "committors.json"
        _write_committor_json(path, committors)
        return path
    return write_committors(run.out / "committors.csv", committors)


# =============================================================================
# Subcommands
# =============================================================================


def cmd_committor(run: Run) -> None:
    document = run.chain()
    committors = solve(
        document.spec, document.sets, method=run.config.method, tolerances=run.tolerances
    )
    run.residuals.update(committors.residuals)
    path = _write_committors(run, committors)
    run.finish(
        "committor",
        f"Committors for {committors.n_slices} slice(s) in {path.name}.",
        regime=document.spec.regime,
    )


def cmd_stats(run: Run) -> None:
    document = run.chain()
    spec, sets = document.spec, document.sets
    densities = densities_for(spec, tolerances=run.tolerances)
    committors = solve(
        spec, sets, method=run.config.method, densities=densities, tolerances=run.tolerances
    )
    run.residuals.update(committors.residuals)
    stats = statistics_from(spec, sets, committors, densities, run.tolerances)
    _write_committors(run, committors)
    write_stats(run.out, stats, run.args.format)

    report = check_conservation(stats, sets, run.tolerances)
    (run.out / "conservation.json").write_text(dumps(report.to_dict()))
    extra: Dict[str, Any] = {}
    if document.grid is not None:
        fields = [
            None if f is None else current_vector_field(document.grid, f)
            for f in stats.effective
        ]
        write_vector_field(run.out / "effective_current_field.csv", document.grid, fields)
        channels = channel_currents(document.grid, stats.effective)
        (run.out / "channels.json").write_text(dumps(channels.to_dict()))
        extra["channel"] = {
            "dominant": channels.dominant,
            "below": channels.below[channels.centre],
            "above": channels.above[channels.centre],
        }

    run.finish(
        "stats",
        f"Rate {fmt(stats.aggregates.rate)}; see stats and conservation.json.",
        regime=spec.regime,
        aggregates=stats.aggregates.to_dict(),
        conservation=report.to_dict(),
        **extra,
    )
    if not report.passed:
        raise OracleFailure(
            "Current conservation violated beyond tolerance.", report.to_dict()
        )


def cmd_ulam_build(run: Run) -> None:
    if run.config.ulam is None:
        raise ValidationError("ulam-build needs a config with an 'ulam' block.")
    document = run.chain()
    path = write_chain(
        run.out / "chain.json", document.spec, document.sets, document.grid, document.extra
    )
    langevin = document.extra.get("langevin", {})
    forcing = langevin.get("forcing")
    if forcing is not None and isinstance(document.spec, PeriodicChain):
        _write_forcing_snapshots(run, document, forcing, langevin["tau"])
    run.finish(
        "ulam-build",
        f"Chain written to {path.name}; pass it to the other commands with --config.",
        regime=document.spec.regime,
        n_states=document.spec.n_states,
        langevin=langevin,
    )


def _write_forcing_snapshots(run: Run, document, forcing: Dict[str, Any], tau: float) -> None:
    centers = document.grid.centers()
    rows = ["slice,cell,x,y,fx,fy"]
    for m in range(document.spec.period):
        fx, fy = circulation_forcing(
            centers[:, 0], centers[:, 1], m * tau, forcing["amplitude"], forcing["period"]
        )
        for cell in range(len(centers)):
            values = (centers[cell, 0], centers[cell, 1], fx[cell], fy[cell])
            rows.append(",".join([str(m), str(cell)] + [fmt(v) for v in values]))
    (run.out / "forcing.csv").write_text("\n".join(rows) + "\n")


def cmd_simulate(run: Run) -> None:
    document = run.chain()
    options = run.config.simulate
    length = run.args.length or options.get("length")
    count = run.args.trajectories or options.get("n_trajectories", 1)
    trajectories = simulate(
        document.spec,
        length=length,
        n_trajectories=int(count),
        seed=run.seed,
        start_slice=int(options.get("start_slice", 0)),
        workers=run.args.workers,
        tolerances=run.tolerances,
    )
    path = write_trajectories(run.out / "trajectories.csv", trajectories, document.spec.n_states)
    run.finish(
        "simulate",
        f"{len(trajectories)} trajectories in {path.name}.",
        n_trajectories=len(trajectories),
        length=len(trajectories[0]),
    )


def cmd_converge(run: Run) -> None:
    document = run.chain()
    spec, sets = document.spec, document.sets
    if not isinstance(spec, StationaryChain):
        raise PreconditionError("converge needs a stationary chain.")
    windows = run.config.windows
    if run.args.windows:
        windows = [int(w) for w in run.args.windows.split(",")]
    if not windows or any(b <= a for a, b in zip(windows, windows[1:])):
        raise ValidationError(f"converge needs increasing window lengths, got {windows}.")

    pi = stationary_distribution(spec.matrix, tolerances=run.tolerances)
    limit = solve_stationary(spec.matrix, sets, pi=pi, tolerances=run.tolerances)
    run.residuals.update(limit.residuals)
    table = []
    for length in windows:
        q_plus, q_minus = window_committors(
            spec.matrix, pi, sets, length, tolerances=run.tolerances
        )
        table.append(
            {
                "N": length,
                "error_plus": float(np.linalg.norm(q_plus - limit.forward[0])),
                "error_minus": float(np.linalg.norm(q_minus - limit.backward[0])),
            }
        )

    lines = ["N,error_plus,error_minus"]
    lines += [f"{row['N']},{fmt(row['error_plus'])},{fmt(row['error_minus'])}" for row in table]
    (run.out / "converge.csv").write_text("\n".join(lines) + "\n")
    fit = convergence_fit(table)
    (run.out / "converge.json").write_text(dumps({"windows": table, "fit": fit}))
    run.finish("converge", f"Slope {fit.get('slope')}; see converge.csv.", fit=fit)


def convergence_fit(table: List[Dict[str, float]], floor: float = 1e-14) -> Dict[str, Any]:
    """Least-squares fit of ``log(error_plus)`` against ``N`` over errors above ``floor``."""
    points = [(row["N"], row["error_plus"]) for row in table if row["error_plus"] > floor]
    converged = bool(table) and max(table[-1]["error_plus"], table[-1]["error_minus"]) < 1e-12
    if len(points) < 3:
        return {"slope": None, "intercept": None, "r_squared": None, "converged": converged}
    result = linregress([p[0] for p in points], np.log([p[1] for p in points]))
    return {
        "slope": float(result.slope),
        "intercept": float(result.intercept),
        "r_squared": float(result.rvalue**2),
        "converged": converged,
    }


def cmd_validate(run: Run) -> None:
    document = run.chain()
    spec, sets = document.spec, document.sets
    tol = run.tolerances
    options = run.config.validate
    if spec.n_states > tol.oracle_max_states:
        raise PreconditionError(
            f"validate is limited to {tol.oracle_max_states} states, chain has {spec.n_states}."
        )
    if isinstance(spec, FiniteTimeChain) and spec.horizon > tol.oracle_max_horizon:
        raise PreconditionError(
            f"validate is limited to horizon {tol.oracle_max_horizon}, chain has {spec.horizon}."
        )

    densities = densities_for(spec, tolerances=tol)
    committors = solve(spec, sets, method=run.config.method, densities=densities, tolerances=tol)
    run.residuals.update(committors.residuals)
    report = {"checks": {}, "estimators": {}}
    failures: List[str] = []

    max_len = int(options.get("max_len", 200))
    path_len = int(options.get("path_len", 6))
    worst_exact = 0.0
    worst_excess = 0.0
    _, _, c = sets.split(spec.n_states)
    depth = spec.horizon - 1 if isinstance(spec, FiniteTimeChain) else path_len
    prefixes = path_prefix_bound(spec.n_states, len(c), depth)
    walk_paths = prefixes <= MAX_PATH_PREFIXES
    if not walk_paths:
        logger.info(
            "Skipping path-by-path enumeration: up to %d prefixes, cap %d",
            prefixes,
            MAX_PATH_PREFIXES,
        )
    report["checks"]["path_enumeration"] = "run" if walk_paths else "skipped"
    for k in range(committors.n_slices):
        for direction, values in zip(DIRECTIONS, (committors.forward, committors.backward)):
            for state in c:
                q = float(values[k][state])
                results = [
                    enumerate_committor(
                        spec, sets, int(state), k, max_len, direction=direction, tolerances=tol
                    )
                ]
                if walk_paths:
                    results.append(
                        enumerate_paths(
                            spec,
                            sets,
                            int(state),
                            k,
                            path_len,
                            direction=direction,
                            tolerances=tol,
                        )
                    )
                if results[0].exact:
                    worst_exact = max(worst_exact, abs(results[0].lower - q))
                for result in results:
                    excess = max(result.lower - q, q - result.upper, 0.0)
                    worst_excess = max(worst_excess, excess)
    report["checks"]["enumeration_exact_deviation"] = worst_exact
    report["checks"]["enumeration_sandwich_excess"] = worst_excess
    if worst_exact > tol.committor_residual:
        failures.append("enumeration_exact_deviation")
    if worst_excess > tol.committor_residual:
        failures.append("enumeration_sandwich_excess")

    stats = statistics_from(spec, sets, committors, densities, tol)
    conservation = check_conservation(stats, sets, tol)
    report["checks"]["conservation"] = conservation.to_dict()
    if not conservation.passed:
        failures.append("conservation")

    z_fail = float(options.get("z_fail", 5.0))
    if isinstance(spec, StationaryChain):
        steps = int(options.get("ergodic_steps", 1_000_000))
        (traj,) = simulate(spec, length=steps, seed=run.seed, tolerances=tol)
        estimate = ergodic_estimates(traj, sets, spec.n_states)
        z = z_score(estimate.rate, stats.aggregates.rate, estimate.rate_se)
        report["estimators"]["ergodic_rate"] = {
            "estimate": estimate.rate,
            "se": estimate.rate_se,
            "exact": stats.aggregates.rate,
            "z": z if np.isfinite(z) else None,
        }
        if z > z_fail:
            failures.append("ergodic_rate")
    elif isinstance(spec, FiniteTimeChain):
        samples = int(options.get("ensemble_samples", 100_000))
        estimate = ensemble_rate_estimate(
            spec, sets, samples, run.seed, workers=run.args.workers, tolerances=tol
        )
        z = z_score(estimate.rate, stats.aggregates.rate, estimate.se)
        report["estimators"]["ensemble_rate"] = {
            "estimate": estimate.rate,
            "se": estimate.se,
            "exact": stats.aggregates.rate,
            "z": z if np.isfinite(z) else None,
        }
        if z > z_fail:
            failures.append("ensemble_rate")

    report["failures"] = failures
    report["passed"] = not failures
    (run.out / "validation.json").write_text(dumps(report))
    run.finish(
        "validate",
        "All checks passed." if not failures else f"Failed: {', '.join(failures)}.",
        passed=not failures,
    )
    if failures:
        raise OracleFailure(f"Validation failed: {', '.join(failures)}.", {"failures": failures})


COMMANDS = {
    "committor": (cmd_committor, "Solve forward and backward committors"),
    "stats": (cmd_stats, "Compute reactive statistics and the conservation report"),
    "ulam-build": (cmd_ulam_build, "Estimate an Ulam chain from Langevin dynamics"),
    "simulate": (cmd_simulate, "Sample seeded trajectories"),
    "converge": (cmd_converge, "Window committors versus stationary committors"),
    "validate": (cmd_validate, "Cross-check solvers against enumeration and simulation"),
}


# =============================================================================
# Entry point
# =============================================================================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="markov-tpt",
        description="Transition path theory for stationary, periodic and finite-time chains",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    parser.add_argument("--version", action="version", version=f"markov-tpt {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="Experiment or chain file")
    common.add_argument("--out", metavar="DIR", help="Output directory (default: config 'out')")
    common.add_argument("--seed", type=int, help="RNG seed (default: config 'seed' or 0)")
    common.add_argument(
        "--tolerance",
        action="append",
        metavar="NAME=VALUE",
        help="Override one tolerance; repeatable",
    )
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument(
        "--set-radius",
        type=float,
        help="Radius of the default disk sets A and B on Ulam grids (default: 0.35)",
    )
    common.add_argument("--workers", type=int, help="Worker threads (default: TPT_WORKERS)")
    common.add_argument(
        "--log-level",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        help="Log level (default: TPT_LOG_LEVEL or WARNING)",
    )

    sub = parser.add_subparsers(dest="command", required=True)
    for name, (func, help_text) in COMMANDS.items():
        cmd = sub.add_parser(name, parents=[common], help=help_text)
        cmd.set_defaults(func=func)
        if name == "simulate":
            cmd.add_argument("--length", type=int, help="Trajectory length (time points)")
            cmd.add_argument("--trajectories", type=int, help="Number of trajectories")
        if name == "converge":
            cmd.add_argument("--windows", help="Comma-separated increasing window lengths")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=args.log_level or get_log_level(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )

    out_dir: Optional[Path] = Path(args.out) if args.out else None
    try:
        run = Run(args)
        out_dir = run.out
        args.func(run)
    except TPTError as e:
        document = make_error(e.error_type, e.message, e.suggestion, e.details or None)
        print(document, file=sys.stderr)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "error.json").write_text(document)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
