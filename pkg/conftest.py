"""
Pytest configuration for markov-tpt tests.

Adds --run-integration flag for the long acceptance runs (Ulam estimates on the
300-cell triple-well grid, seed sweeps, million-step trajectories).
"""

import json
import os
from pathlib import Path

import numpy as np
import pytest

from markov_tpt.chains import (
    AbSets,
    FiniteTimeChain,
    PeriodicChain,
    StationaryChain,
    TransitionMatrix,
)

GAMBLER = [
    [0.5, 0.5, 0.0, 0.0],
    [0.5, 0.0, 0.5, 0.0],
    [0.0, 0.5, 0.0, 0.5],
    [0.0, 0.0, 0.5, 0.5],
]

CHAINS_DIR = Path(__file__).parent / "chains"

FIVE_STATE = json.loads((CHAINS_DIR / "five_state.json").read_text())["matrices"][0]

PERIODIC = [
    [[0.5, 0.5, 0.0], [0.0, 0.0, 1.0], [0.0, 0.5, 0.5]],
    [[0.5, 0.5, 0.0], [1.0, 0.0, 0.0], [0.0, 0.5, 0.5]],
]


@pytest.fixture(autouse=True)
def isolate_environment(monkeypatch):
    """Drop TPT_* variables so a developer's shell cannot change tolerances or workers."""
    for name in list(os.environ):
        if name.startswith("TPT_"):
            monkeypatch.delenv(name, raising=False)
    yield


@pytest.fixture
def gambler():
    """Symmetric walk on 0..3 with sticky ends; A={0}, B={3}, uniform pi."""
    return StationaryChain(TransitionMatrix.from_array(GAMBLER)), AbSets({0}, {3})


@pytest.fixture
def two_state():
    """P = [[0.8, 0.2], [0.1, 0.9]] with A={0}, B={1}: pi = (1/3, 2/3), empty C."""
    matrix = TransitionMatrix.from_array([[0.8, 0.2], [0.1, 0.9]])
    return StationaryChain(matrix), AbSets({0}, {1})


@pytest.fixture
def five_state():
    return StationaryChain(TransitionMatrix.from_array(FIVE_STATE)), AbSets({0}, {4})


@pytest.fixture
def periodic_pair():
    """Period 2: state 1 moves into B at even slices and into A at odd ones."""
    matrices = tuple(TransitionMatrix.from_array(m) for m in PERIODIC)
    return PeriodicChain(matrices), AbSets({0}, {2})


@pytest.fixture
def finite_gambler():
    """The gambler walk on a window of N=4 time points from the uniform density."""
    matrix = TransitionMatrix.from_array(GAMBLER)
    return FiniteTimeChain((matrix,) * 3, np.full(4, 0.25)), AbSets({0}, {3})


def pytest_addoption(parser):
    parser.addoption(
        "--run-integration",
        action="store_true",
        default=False,
        help="Run long acceptance tests (triple-well Ulam chains, estimator sweeps)",
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "integration: long-running acceptance runs")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-integration"):
        return
    skip_integration = pytest.mark.skip(reason="need --run-integration to run")
    for item in items:
        if "integration" in item.keywords:
            item.add_marker(skip_integration)
