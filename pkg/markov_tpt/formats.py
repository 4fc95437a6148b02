"""Reading and writing chain specifications and result files.

Chain specification (JSON)::

    {
      "regime": "stationary" | "periodic" | "finite",
      "n_states": 4,
      "matrices": [ <matrix>, ... ],
      "period": 2,                      # periodic only, must equal len(matrices)
      "horizon": 5,                     # finite only, must equal len(matrices) + 1
      "initial_density": [...],         # finite only
      "set_A": [0], "set_B": [3],
      "grid": {"box": [...], "cell_size": [...]}   # optional Ulam geometry
    }

A ``<matrix>`` is a list of rows, a path to a CSV file (relative to the spec
file) or a sparse object ``{"shape": [n, n], "entries": [[i, j, value], ...]}``.
JSON floats use Python's shortest round-trip repr, so export and re-import are
bit-exact. CSV floats are written with 17 significant digits; undefined values
are ``null`` in JSON and empty fields in CSV.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from markov_tpt.chains import (
    AbSets,
    ChainSpec,
    FiniteTimeChain,
    PeriodicChain,
    StationaryChain,
    TransitionMatrix,
)
from markov_tpt.committors import CommittorField
from markov_tpt.concurrency import GENERATOR_ID
from markov_tpt.config import Tolerances
from markov_tpt.errors import ValidationError
from markov_tpt.oracle import TrajectorySample
from markov_tpt.reactive import ReactiveStats
from markov_tpt.responses import dumps
from markov_tpt.ulam import UlamGrid

logger = logging.getLogger(__name__)

REGIMES = ("stationary", "periodic", "finite")


def fmt(value: Optional[float]) -> str:
    """17 significant digits; ``None`` becomes an empty field."""
    if value is None:
        return ""
    return format(float(value), ".17g")


@dataclass(eq=False)
class ChainDocument:
    """A chain spec as read from disk, with its sets and optional grid geometry."""

    spec: ChainSpec
    sets: Optional[AbSets] = None
    grid: Optional[UlamGrid] = None
    extra: Dict[str, Any] = field(default_factory=dict)


# =============================================================================
# Chain specifications
# =============================================================================


def _matrix_from(
    raw: Any, base_dir: Optional[Path], tolerances: Optional[Tolerances]
) -> TransitionMatrix:
    if isinstance(raw, str):
        path = Path(raw)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        if not path.exists():
            raise ValidationError(f"Matrix file not found: {path}")
        return TransitionMatrix.from_array(
            np.loadtxt(path, delimiter=",", ndmin=2), tolerances
        )
    if isinstance(raw, Mapping):
        try:
            n_rows, n_cols = raw["shape"]
            entries = np.asarray(raw.get("entries", []), dtype=float).reshape(-1, 3)
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"Sparse matrix needs 'shape' and [i, j, value] entries: {e}")
        matrix = sp.csr_matrix(
            (entries[:, 2], (entries[:, 0].astype(int), entries[:, 1].astype(int))),
            shape=(int(n_rows), int(n_cols)),
        )
        return TransitionMatrix.from_array(matrix, tolerances)
    try:
        return TransitionMatrix.from_array(np.asarray(raw, dtype=float), tolerances)
    except ValueError as e:
        raise ValidationError(f"Matrix is not a rectangular array of numbers: {e}")


def _matrix_to(matrix: TransitionMatrix) -> Any:
    if matrix.is_sparse:
        coo = matrix.csr().tocoo()
        return {
            "shape": [matrix.n_states, matrix.n_states],
            "entries": [
                [int(i), int(j), float(v)] for i, j, v in zip(coo.row, coo.col, coo.data)
            ],
        }
    return matrix.dense().tolist()


def chain_from_dict(
    data: Mapping[str, Any],
    base_dir: Optional[Path] = None,
    tolerances: Optional[Tolerances] = None,
) -> ChainDocument:
    """Build a :class:`ChainDocument` from a parsed chain specification."""
    regime = data.get("regime")
    if regime not in REGIMES:
        raise ValidationError(f"'regime' must be one of {', '.join(REGIMES)}, got {regime!r}.")
    raw_matrices = data.get("matrices")
    if not isinstance(raw_matrices, list):
        raise ValidationError("'matrices' must be a list of matrices.")
    matrices = tuple(_matrix_from(raw, base_dir, tolerances) for raw in raw_matrices)

    n_states = data.get("n_states")
    if n_states is not None:
        for k, matrix in enumerate(matrices):
            if matrix.n_states != int(n_states):
                raise ValidationError(
                    f"matrices[{k}] has {matrix.n_states} states but n_states is {n_states}."
                )

    if regime == "stationary":
        if len(matrices) != 1:
            raise ValidationError(f"A stationary chain has one matrix, got {len(matrices)}.")
        spec: ChainSpec = StationaryChain(matrices[0])
    elif regime == "periodic":
        period = data.get("period", len(matrices))
        if int(period) != len(matrices) or not matrices:
            raise ValidationError(f"period {period} does not match {len(matrices)} matrices.")
        spec = PeriodicChain(matrices)
    else:
        horizon = data.get("horizon", len(matrices) + 1)
        if int(horizon) != len(matrices) + 1:
            raise ValidationError(
                f"horizon {horizon} needs {int(horizon) - 1} matrices, got {len(matrices)}."
            )
        if "initial_density" not in data:
            raise ValidationError("A finite-time chain needs 'initial_density'.")
        spec = FiniteTimeChain(matrices, np.asarray(data["initial_density"], dtype=float))

    sets = None
    if "set_A" in data or "set_B" in data:
        sets = AbSets(data.get("set_A", []), data.get("set_B", []))
    grid = UlamGrid.from_dict(data["grid"]) if data.get("grid") else None
    known = {"regime", "n_states", "matrices", "period", "horizon", "initial_density"}
    known |= {"set_A", "set_B", "grid"}
    extra = {k: v for k, v in data.items() if k not in known}
    return ChainDocument(spec, sets, grid, extra)


def chain_to_dict(
    spec: ChainSpec,
    sets: Optional[AbSets] = None,
    grid: Optional[UlamGrid] = None,
    extra: Optional[Mapping[str, Any]] = None,
) -> Dict[str, Any]:
    data: Dict[str, Any] = {
        "regime": spec.regime,
        "n_states": spec.n_states,
        "matrices": [_matrix_to(m) for m in spec.matrices],
    }
    if isinstance(spec, PeriodicChain):
        data["period"] = spec.period
    if isinstance(spec, FiniteTimeChain):
        data["horizon"] = spec.horizon
        data["initial_density"] = spec.initial_density.tolist()
    if sets is not None:
        data["set_A"] = sorted(sets.set_a)
        data["set_B"] = sorted(sets.set_b)
    if grid is not None:
        data["grid"] = grid.to_dict()
    if extra:
        data.update(extra)
    return data


def read_chain(path: Union[str, Path], tolerances: Optional[Tolerances] = None) -> ChainDocument:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Chain file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"Chain file {path} is not valid JSON: {e}")
    return chain_from_dict(data, path.parent, tolerances)


def write_chain(
    path: Union[str, Path],
    spec: ChainSpec,
    sets: Optional[AbSets] = None,
    grid: Optional[UlamGrid] = None,
    extra: Optional[Mapping[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.write_text(dumps(chain_to_dict(spec, sets, grid, extra)))
    logger.info("Wrote %s chain to %s", spec.regime, path)
    return path


# =============================================================================
# Result files
# =============================================================================


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_committors(path: Union[str, Path], committors: CommittorField) -> Path:
    """``slice,state,q_plus,q_minus``."""
    rows = (
        (k, i, fmt(q_plus[i]), fmt(q_minus[i]))
        for k, (q_plus, q_minus) in enumerate(zip(committors.forward, committors.backward))
        for i in range(len(q_plus))
    )
    return _write_rows(Path(path), ("slice", "state", "q_plus", "q_minus"), rows)


def read_committors(path: Union[str, Path]) -> Dict[str, List[np.ndarray]]:
    """Inverse of :func:`write_committors`: ``{"forward": [...], "backward": [...]}``."""
    forward: Dict[int, Dict[int, float]] = {}
    backward: Dict[int, Dict[int, float]] = {}
    with Path(path).open(newline="") as handle:
        for row in csv.DictReader(handle):
            k, i = int(row["slice"]), int(row["state"])
            forward.setdefault(k, {})[i] = float(row["q_plus"])
            backward.setdefault(k, {})[i] = float(row["q_minus"])

    def stack(values: Dict[int, Dict[int, float]]) -> List[np.ndarray]:
        return [
            np.array([values[k][i] for i in sorted(values[k])]) for k in sorted(values)
        ]

    return {"forward": stack(forward), "backward": stack(backward)}


def _triples(matrix: Optional[sp.spmatrix]) -> Optional[List[List[Any]]]:
    if matrix is None:
        return None
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    return [
        [int(coo.row[k]), int(coo.col[k]), float(coo.data[k])] for k in order
    ]


def stats_to_dict(stats: ReactiveStats) -> Dict[str, Any]:
    """One record per slice plus the aggregates block."""
    slices = []
    for k in range(stats.n_slices):
        mu_hat = stats.mu_hat[k]
        slices.append(
            {
                "slice": k,
                "mu": stats.mu[k].tolist(),
                "mu_hat": None if mu_hat is None else mu_hat.tolist(),
                "z": stats.z[k],
                "rate_out_a": stats.rate_out_a[k],
                "rate_in_b": stats.rate_in_b[k],
                "current": _triples(stats.current[k]),
                "effective_current": _triples(stats.effective[k]),
            }
        )
    return {
        "regime": stats.regime,
        "n_states": stats.n_states,
        "aggregates": stats.aggregates.to_dict(),
        "slices": slices,
    }


def write_stats(
    out_dir: Union[str, Path], stats: ReactiveStats, fmt_name: str = "json"
) -> List[Path]:
    """Statistics as ``stats.json`` or as ``stats_*.csv`` plus ``aggregates.json``."""
    out_dir = Path(out_dir)
    if fmt_name == "json":
        path = out_dir / "stats.json"
        path.write_text(dumps(stats_to_dict(stats)))
        return [path]

    written = []
    written.append(
        _write_rows(
            out_dir / "stats_states.csv",
            ("slice", "state", "mu", "mu_hat"),
            (
                (k, i, fmt(stats.mu[k][i]), "" if mu_hat is None else fmt(mu_hat[i]))
                for k, mu_hat in enumerate(stats.mu_hat)
                for i in range(stats.n_states)
            ),
        )
    )
    rows = []
    for k, (current, effective) in enumerate(zip(stats.current, stats.effective)):
        if current is None:
            continue
        net = sp.csr_matrix(effective)
        for i, j, value in _triples(current):
            rows.append((k, i, j, fmt(value), fmt(net[i, j])))
    written.append(
        _write_rows(
            out_dir / "stats_current.csv", ("slice", "i", "j", "current", "effective"), rows
        )
    )
    written.append(
        _write_rows(
            out_dir / "stats_slices.csv",
            ("slice", "z", "rate_out_a", "rate_in_b"),
            (
                (k, fmt(stats.z[k]), fmt(stats.rate_out_a[k]), fmt(stats.rate_in_b[k]))
                for k in range(stats.n_slices)
            ),
        )
    )
    aggregates = out_dir / "aggregates.json"
    aggregates.write_text(dumps(stats.aggregates.to_dict()))
    written.append(aggregates)
    return written


def write_vector_field(
    path: Union[str, Path], grid: UlamGrid, fields: Sequence[Optional[np.ndarray]]
) -> Path:
    """``slice,cell,x,y,vx,vy``: per-cell effective-current vectors for plotting."""
    centers = grid.centers()
    rows = (
        (k, cell, *(fmt(v) for v in centers[cell]), *(fmt(v) for v in vec[cell]))
        for k, vec in enumerate(fields)
        if vec is not None
        for cell in range(grid.n_cells)
    )
    return _write_rows(Path(path), ("slice", "cell", "x", "y", "vx", "vy"), rows)


def write_trajectories(
    path: Union[str, Path], trajectories: Sequence[TrajectorySample], n_states: int
) -> Path:
    """Header comment ``# n_states=.. length=.. seed=.. generator=..`` then
    ``trajectory,time,state`` rows."""
    path = Path(path)
    length = len(trajectories[0]) if trajectories else 0
    seed = trajectories[0].rng_seed if trajectories else 0
    with path.open("w", newline="") as handle:
        handle.write(
            f"# n_states={n_states} length={length} seed={seed} generator={GENERATOR_ID}\n"
        )
        writer = csv.writer(handle)
        writer.writerow(("trajectory", "time", "state"))
        for traj in trajectories:
            for k, state in enumerate(traj.states):
                writer.writerow((traj.index, traj.slice_offset + k, int(state)))
    return path


def read_trajectories(path: Union[str, Path]) -> List[TrajectorySample]:
    path = Path(path)
    with path.open(newline="") as handle:
        header = handle.readline().lstrip("#").split()
        meta = dict(item.split("=", 1) for item in header)
        seed = int(meta.get("seed", 0))
        grouped: Dict[int, List[int]] = {}
        offsets: Dict[int, int] = {}
        for row in csv.DictReader(handle):
            index = int(row["trajectory"])
            grouped.setdefault(index, []).append(int(row["state"]))
            offsets.setdefault(index, int(row["time"]))
    return [
        TrajectorySample(np.array(grouped[k]), offsets[k], seed, k) for k in sorted(grouped)
    ]
