#!/usr/bin/env python3
"""
Tests for the markov-tpt command line: subcommands, output files and exit codes.
"""

import csv
import json

import numpy as np
import pytest

from conftest import FIVE_STATE, GAMBLER, PERIODIC
from markov_tpt.cli import build_parser, convergence_fit, main
from markov_tpt.formats import read_chain, read_committors, read_trajectories


def write_json(path, data):
    path.write_text(json.dumps(data))
    return path


@pytest.fixture
def gambler_file(tmp_path):
    return write_json(
        tmp_path / "gambler.json",
        {"regime": "stationary", "matrices": [GAMBLER], "set_A": [0], "set_B": [3]},
    )


@pytest.fixture
def five_state_file(tmp_path):
    return write_json(
        tmp_path / "five.json",
        {
            "regime": "stationary",
            "n_states": 5,
            "matrices": [FIVE_STATE],
            "set_A": [0],
            "set_B": [4],
        },
    )


@pytest.fixture
def finite_file(tmp_path):
    return write_json(
        tmp_path / "finite.json",
        {
            "regime": "finite",
            "horizon": 4,
            "matrices": [GAMBLER] * 3,
            "initial_density": [0.25] * 4,
            "set_A": [0],
            "set_B": [3],
        },
    )


@pytest.fixture
def periodic_file(tmp_path):
    return write_json(
        tmp_path / "periodic.json",
        {"regime": "periodic", "period": 2, "matrices": PERIODIC, "set_A": [0], "set_B": [2]},
    )


def read_error(out):
    return json.loads((out / "error.json").read_text())["_error"]


# =============================================================================
# Parser
# =============================================================================


class TestParser:
    def test_every_subcommand_is_registered(self):
        parser = build_parser()
        for name in ("committor", "stats", "ulam-build", "simulate", "converge", "validate"):
            args = parser.parse_args([name, "--config", "x.json"])
            assert args.command == name

    def test_help_lists_environment_variables(self):
        help_text = build_parser().format_help()
        assert "TPT_WORKERS" in help_text
        assert "TPT_TOL_" in help_text

    def test_config_is_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["stats"])


# =============================================================================
# committor / stats
# =============================================================================


class TestCommittorCommand:
    def test_writes_committors_and_provenance(self, gambler_file, tmp_path):
        out = tmp_path / "out"
        code = main(["committor", "--config", str(gambler_file), "--out", str(out)])
        assert code == 0
        committors = read_committors(out / "committors.csv")
        assert committors["forward"][0][1] == pytest.approx(1 / 3, abs=1e-15)
        assert committors["backward"][0][2] == pytest.approx(1 / 3, abs=1e-15)

        run = json.loads((out / "run.json").read_text())
        assert run["command"] == "committor"
        assert run["generator"] == "numpy.SFC64"
        assert run["seed"] == 0
        assert len(run["config_hash"]) == 64
        assert run["tolerances"]["committor_residual"] == 1e-10
        assert "forward" in run["residuals"]
        assert "_hint" in run

    def test_json_format(self, periodic_file, tmp_path):
        out = tmp_path / "out"
        code = main(
            ["committor", "--config", str(periodic_file), "--out", str(out), "--format", "json"]
        )
        assert code == 0
        data = json.loads((out / "committors.json").read_text())
        assert data["regime"] == "periodic"
        assert data["slices"][0]["q_plus"] == pytest.approx([0, 1, 1])
        assert data["slices"][1]["q_plus"] == pytest.approx([0, 0, 1])

    def test_tolerance_overrides_reach_the_solver(self, gambler_file, tmp_path):
        out = tmp_path / "out"
        code = main(
            [
                "committor",
                "--config",
                str(gambler_file),
                "--out",
                str(out),
                "--tolerance",
                "committor_residual=-1",
            ]
        )
        assert code == 3
        assert read_error(out)["type"] == "solver_failure"

    def test_unknown_tolerance(self, gambler_file, tmp_path):
        out = tmp_path / "out"
        code = main(
            ["committor", "--config", str(gambler_file), "--out", str(out), "--tolerance", "x=1"]
        )
        assert code == 2
        assert "Unknown tolerance" in read_error(out)["message"]

    def test_malformed_tolerance(self, gambler_file, tmp_path):
        out = tmp_path / "out"
        code = main(
            ["committor", "--config", str(gambler_file), "--out", str(out), "--tolerance", "x"]
        )
        assert code == 2


class TestValidationErrors:
    def test_non_stochastic_chain(self, tmp_path, capsys):
        bad = write_json(
            tmp_path / "bad.json",
            {
                "regime": "stationary",
                "matrices": [[[0.5, 0.4], [0.5, 0.5]]],
                "set_A": [0],
                "set_B": [1],
            },
        )
        out = tmp_path / "out"
        code = main(["stats", "--config", str(bad), "--out", str(out)])
        assert code == 2
        error = read_error(out)
        assert error["type"] == "validation_error"
        assert error["details"]["diagnostics"][0]["code"] == "row_not_stochastic"
        assert "validation_error" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        out = tmp_path / "out"
        assert main(["stats", "--config", str(tmp_path / "nope.json"), "--out", str(out)]) == 2

    def test_period_mismatch(self, tmp_path):
        spec = write_json(
            tmp_path / "p.json",
            {"regime": "periodic", "period": 3, "matrices": PERIODIC, "set_A": [0], "set_B": [2]},
        )
        assert main(["committor", "--config", str(spec), "--out", str(tmp_path / "o")]) == 2


class TestStatsCommand:
    def test_json_stats(self, five_state_file, tmp_path):
        out = tmp_path / "out"
        assert main(["stats", "--config", str(five_state_file), "--out", str(out),
                     "--format", "json"]) == 0
        stats = json.loads((out / "stats.json").read_text())
        aggregates = stats["aggregates"]
        assert aggregates["rate"] == pytest.approx(aggregates["rate_in"], abs=1e-12)
        conservation = json.loads((out / "conservation.json").read_text())
        assert conservation["passed"]

    def test_csv_stats_for_finite_window(self, finite_file, tmp_path):
        out = tmp_path / "out"
        assert main(["stats", "--config", str(finite_file), "--out", str(out)]) == 0
        with (out / "stats_slices.csv").open() as handle:
            rows = list(csv.DictReader(handle))
        assert [row["rate_out_a"] == "" for row in rows] == [False, False, False, True]
        assert rows[0]["rate_in_b"] == ""
        aggregates = json.loads((out / "aggregates.json").read_text())
        assert aggregates["rate"] == pytest.approx(1 / 128)

    def test_period_one_matches_stationary(self, tmp_path):
        stationary = write_json(
            tmp_path / "s.json",
            {"regime": "stationary", "matrices": [FIVE_STATE], "set_A": [0], "set_B": [4]},
        )
        periodic = write_json(
            tmp_path / "p.json",
            {"regime": "periodic", "matrices": [FIVE_STATE], "set_A": [0], "set_B": [4]},
        )
        assert main(["stats", "--config", str(stationary), "--out", str(tmp_path / "a")]) == 0
        assert main(["stats", "--config", str(periodic), "--out", str(tmp_path / "b")]) == 0
        for name in ("committors.csv", "stats_states.csv", "stats_current.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# =============================================================================
# simulate / converge / validate
# =============================================================================


class TestSimulateCommand:
    def test_reproducible_trajectories(self, gambler_file, tmp_path):
        args = ["simulate", "--config", str(gambler_file), "--seed", "42", "--length", "100",
                "--trajectories", "2"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b"), "--workers", "3"]) == 0
        first = (tmp_path / "a" / "trajectories.csv").read_text()
        assert first == (tmp_path / "b" / "trajectories.csv").read_text()
        assert first.startswith("# n_states=4 length=100 seed=42 generator=numpy.SFC64")
        trajectories = read_trajectories(tmp_path / "a" / "trajectories.csv")
        assert [len(t) for t in trajectories] == [100, 100]


class TestConvergeCommand:
    def test_window_errors_decay(self, tmp_path):
        config = write_json(
            tmp_path / "converge.json",
            {"chain": "gambler.json", "windows": [1, 3, 5, 9, 17, 33, 65, 129]},
        )
        write_json(
            tmp_path / "gambler.json",
            {"regime": "stationary", "matrices": [GAMBLER], "set_A": [0], "set_B": [3]},
        )
        out = tmp_path / "out"
        assert main(["converge", "--config", str(config), "--out", str(out)]) == 0
        result = json.loads((out / "converge.json").read_text())
        errors = [row["error_plus"] for row in result["windows"]]
        assert errors == sorted(errors, reverse=True)
        assert result["fit"]["slope"] < 0
        assert result["fit"]["converged"]

    def test_needs_stationary_chain(self, periodic_file, tmp_path):
        out = tmp_path / "out"
        code = main(["converge", "--config", str(periodic_file), "--out", str(out),
                     "--windows", "1,3"])
        assert code == 2

    def test_fit_skips_vanished_errors(self):
        table = [{"N": n, "error_plus": 0.5**n, "error_minus": 0.5**n} for n in (1, 3, 5)]
        table.append({"N": 101, "error_plus": 0.0, "error_minus": 0.0})
        fit = convergence_fit(table)
        assert fit["slope"] == pytest.approx(-0.6931471805599453)
        assert fit["r_squared"] == pytest.approx(1.0)
        assert fit["converged"]


class TestValidateCommand:
    def test_stationary_chain_passes(self, tmp_path):
        config = write_json(
            tmp_path / "validate.json",
            {
                "chain": {"regime": "stationary", "matrices": [FIVE_STATE]},
                "sets": {"A": [0], "B": [4]},
                "seed": 7,
                "validate": {"ergodic_steps": 20000},
            },
        )
        out = tmp_path / "out"
        assert main(["validate", "--config", str(config), "--out", str(out)]) == 0
        report = json.loads((out / "validation.json").read_text())
        assert report["passed"]
        assert report["checks"]["enumeration_sandwich_excess"] < 1e-12
        assert "ergodic_rate" in report["estimators"]

    def test_finite_chain_is_exact(self, finite_file, tmp_path):
        config = write_json(
            tmp_path / "validate.json",
            {"chain": finite_file.name, "validate": {"ensemble_samples": 2000}},
        )
        out = tmp_path / "out"
        assert main(["validate", "--config", str(config), "--out", str(out)]) == 0
        report = json.loads((out / "validation.json").read_text())
        assert report["checks"]["path_enumeration"] == "run"
        assert report["checks"]["enumeration_exact_deviation"] < 1e-12
        assert "ensemble_rate" in report["estimators"]

    def test_long_window_skips_path_walk(self, tmp_path):
        rng = np.random.default_rng(11)
        weights = rng.random((6, 6)) + 0.05
        matrix = (weights / weights.sum(axis=1, keepdims=True)).tolist()
        config = write_json(
            tmp_path / "validate.json",
            {
                "chain": {
                    "regime": "finite",
                    "matrices": [matrix] * 11,
                    "initial_density": [1 / 6] * 6,
                    "set_A": [0],
                    "set_B": [5],
                },
                "seed": 2,
                "validate": {"ensemble_samples": 4000},
            },
        )
        out = tmp_path / "out"
        assert main(["validate", "--config", str(config), "--out", str(out)]) == 0
        report = json.loads((out / "validation.json").read_text())
        assert report["checks"]["path_enumeration"] == "skipped"
        assert report["checks"]["enumeration_exact_deviation"] < 1e-12

    def test_state_cap(self, gambler_file, tmp_path):
        out = tmp_path / "out"
        code = main(["validate", "--config", str(gambler_file), "--out", str(out),
                     "--tolerance", "oracle_max_states=3"])
        assert code == 2
        assert read_error(out)["type"] == "precondition_error"


# =============================================================================
# ulam-build
# =============================================================================


class TestUlamBuildCommand:
    @pytest.fixture
    def ulam_config(self, tmp_path):
        def make(**ulam):
            block = {
                "grid": {"box": [-1, 1, -1, 1], "cell_size": [0.5, 0.5]},
                "langevin": {"tau": 0.1, "euler_dt": 0.05, "samples_per_cell": 300},
            }
            block.update(ulam)
            return write_json(
                tmp_path / "ulam.json",
                {"ulam": block, "sets": {"A": [0], "B": [15]}, "seed": 5},
            )

        return make

    def test_build_then_solve(self, ulam_config, tmp_path):
        out = tmp_path / "build"
        assert main(["ulam-build", "--config", str(ulam_config()), "--out", str(out)]) == 0
        document = read_chain(out / "chain.json")
        assert document.spec.n_states == 16
        assert document.grid is not None
        assert sorted(document.sets.set_b) == [15]
        assert document.extra["langevin"]["tau"] == 0.1

        stats_out = tmp_path / "stats"
        assert main(["stats", "--config", str(out / "chain.json"), "--out", str(stats_out)]) == 0
        assert (stats_out / "effective_current_field.csv").exists()
        channels = json.loads((stats_out / "channels.json").read_text())
        assert channels["x_line"] == 0.0 and channels["split_y"] == 0.6
        assert len(channels["slices"]) == 1
        run = json.loads((stats_out / "run.json").read_text())
        assert run["channel"]["dominant"] == channels["dominant"]
        assert run["channel"]["dominant"] in ("lower", "upper")

    def test_same_seed_same_chain(self, ulam_config, tmp_path):
        config = str(ulam_config())
        assert main(["ulam-build", "--config", config, "--out", str(tmp_path / "a")]) == 0
        assert main(["ulam-build", "--config", config, "--out", str(tmp_path / "b"),
                     "--workers", "1"]) == 0
        a = (tmp_path / "a" / "chain.json").read_text()
        assert a == (tmp_path / "b" / "chain.json").read_text()

    def test_periodic_build_writes_forcing(self, ulam_config, tmp_path):
        config = ulam_config(
            regime="periodic",
            langevin={
                "tau": 0.1,
                "euler_dt": 0.05,
                "samples_per_cell": 100,
                "forcing": {"type": "circulation_cosine", "amplitude": 1.4, "period": 0.2},
            },
        )
        out = tmp_path / "out"
        assert main(["ulam-build", "--config", str(config), "--out", str(out)]) == 0
        assert read_chain(out / "chain.json").spec.period == 2
        with (out / "forcing.csv").open() as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 2 * 16

    def test_needs_an_ulam_block(self, gambler_file, tmp_path):
        out = tmp_path / "out"
        assert main(["ulam-build", "--config", str(gambler_file), "--out", str(out)]) == 2
