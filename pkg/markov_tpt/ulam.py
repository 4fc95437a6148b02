"""Ulam discretization of 2-D overdamped Langevin dynamics.

``dX_t = (-grad V(X_t) + F(X_t, t)) dt + sigma dW_t`` is sampled from every
cell of a rectangular grid: ``samples_per_cell`` points drawn uniformly in the
cell are integrated with Euler-Maruyama over one lag time ``tau`` and binned.
Row ``i`` of the estimated matrix is the fraction of samples from cell ``i``
that end in each cell. Endpoints outside the box are clamped to the nearest
boundary cell, so every row sums to one.

Cells are numbered row-major: ``index = iy * nx + ix``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from markov_tpt.chains import TransitionMatrix
from markov_tpt.concurrency import make_generator, map_ordered
from markov_tpt.config import Tolerances
from markov_tpt.errors import PreconditionError, ValidationError

logger = logging.getLogger(__name__)

GRID_TOLERANCE = 1e-9
PERIOD_TOLERANCE = 1e-9

# (x, y, params) -> (V, dV/dx, dV/dy)
Potential = Callable[[np.ndarray, np.ndarray, Mapping[str, Any]], Tuple[np.ndarray, ...]]


# =============================================================================
# Grid
# =============================================================================


@dataclass(frozen=True)
class UlamGrid:
    """A box ``[x_min, x_max] x [y_min, y_max]`` cut into equal rectangular cells."""

    box: Tuple[float, float, float, float]
    cell_size: Tuple[float, float]

    def __post_init__(self):
        box = tuple(float(v) for v in self.box)
        size = self.cell_size
        if isinstance(size, (int, float)):
            size = (size, size)
        size = tuple(float(v) for v in size)
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "cell_size", size)
        if len(box) != 4 or len(size) != 2:
            raise ValidationError("A grid needs a 4-value box and 2 cell sizes.")
        if min(size) <= 0:
            raise ValidationError(f"Cell sizes must be positive, got {size}.")
        for lo, hi, h, axis in ((box[0], box[1], size[0], "x"), (box[2], box[3], size[1], "y")):
            if hi <= lo:
                raise ValidationError(f"Empty box along {axis}: [{lo}, {hi}].")
            count = (hi - lo) / h
            if abs(count - round(count)) > GRID_TOLERANCE * max(1.0, count):
                raise ValidationError(
                    f"Box edge along {axis} ({hi - lo!r}) is not a multiple of the cell size {h!r}."
                )

    @classmethod
    def default_grid(cls) -> "UlamGrid":
        """``[-2, 2] x [-1, 2]`` with ``0.2 x 0.2`` cells (20 x 15 = 300 cells)."""
        return cls((-2.0, 2.0, -1.0, 2.0), (0.2, 0.2))

    @property
    def nx(self) -> int:
        return int(round((self.box[1] - self.box[0]) / self.cell_size[0]))

    @property
    def ny(self) -> int:
        return int(round((self.box[3] - self.box[2]) / self.cell_size[1]))

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def index(self, ix: int, iy: int) -> int:
        return iy * self.nx + ix

    def cell_bounds(self, cell: int) -> Tuple[float, float, float, float]:
        iy, ix = divmod(cell, self.nx)
        hx, hy = self.cell_size
        x0 = self.box[0] + ix * hx
        y0 = self.box[2] + iy * hy
        return x0, x0 + hx, y0, y0 + hy

    def centers(self) -> np.ndarray:
        """Cell midpoints, shape ``(n_cells, 2)``, in index order."""
        hx, hy = self.cell_size
        xs = self.box[0] + (np.arange(self.nx) + 0.5) * hx
        ys = self.box[2] + (np.arange(self.ny) + 0.5) * hy
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def locate(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Cell index of each point; points outside the box go to the nearest boundary cell."""
        hx, hy = self.cell_size
        ix = np.clip(np.floor((x - self.box[0]) / hx).astype(np.int64), 0, self.nx - 1)
        iy = np.clip(np.floor((y - self.box[2]) / hy).astype(np.int64), 0, self.ny - 1)
        return iy * self.nx + ix

    def to_dict(self) -> Dict[str, Any]:
        return {"box": list(self.box), "cell_size": list(self.cell_size)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "UlamGrid":
        try:
            return cls(tuple(data["box"]), data["cell_size"])
        except (KeyError, TypeError) as e:
            raise ValidationError(f"Grid descriptor needs 'box' and 'cell_size': {e}")


# =============================================================================
# Potentials and forcing
# =============================================================================


def triple_well_potential(x, y, params: Optional[Mapping[str, Any]] = None):
    """Deep wells near ``(+-1, 0)``, a shallow well near ``(0, 1.5)``. Returns ``(V, Vx, Vy)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    e1 = np.exp(-(x**2) - (y - 1 / 3) ** 2)
    e2 = np.exp(-(x**2) - (y - 5 / 3) ** 2)
    e3 = np.exp(-((x - 1) ** 2) - y**2)
    e4 = np.exp(-((x + 1) ** 2) - y**2)
    value = (
        0.75 * e1 - 0.75 * e2 - 1.25 * e3 - 1.25 * e4 + x**4 / 20 + (y - 1 / 3) ** 4 / 20
    )
    grad_x = -1.5 * x * e1 + 1.5 * x * e2 + 2.5 * (x - 1) * e3 + 2.5 * (x + 1) * e4 + x**3 / 5
    grad_y = (
        -1.5 * (y - 1 / 3) * e1
        + 1.5 * (y - 5 / 3) * e2
        + 2.5 * y * e3
        + 2.5 * y * e4
        + (y - 1 / 3) ** 3 / 5
    )
    return value, grad_x, grad_y


def flat_potential(x, y, params: Optional[Mapping[str, Any]] = None):
    zeros = np.zeros_like(np.asarray(x, dtype=float) + np.asarray(y, dtype=float))
    return zeros, zeros.copy(), zeros.copy()


def linear_potential(x, y, params: Optional[Mapping[str, Any]] = None):
    """``V = -(d_x x + d_y y)``: a constant drift ``(d_x, d_y)``."""
    dx, dy = (params or {}).get("drift", (0.0, 0.0))
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    value = -(dx * x + dy * y)
    return value, np.full_like(value, -dx), np.full_like(value, -dy)


POTENTIALS: Dict[str, Potential] = {
    "triple_well": triple_well_potential,
    "flat": flat_potential,
    "linear": linear_potential,
}


def circulation_forcing(x, y, t, amplitude: float, period: float):
    """``amplitude * cos(2 pi t / period) * (-y, x)``: alternately anti-clockwise and clockwise."""
    scale = amplitude * math.cos(2 * math.pi * t / period)
    return -scale * np.asarray(y, dtype=float), scale * np.asarray(x, dtype=float)


@dataclass(frozen=True)
class CirculationForcing:
    amplitude: float
    period: float
    type: str = "circulation_cosine"

    def __post_init__(self):
        if self.type != "circulation_cosine":
            raise ValidationError(f"Unknown forcing type {self.type!r}.")
        if self.period <= 0:
            raise ValidationError(f"Forcing period must be positive, got {self.period}.")

    def __call__(self, x, y, t):
        return circulation_forcing(x, y, t, self.amplitude, self.period)

    def to_dict(self) -> Dict[str, Any]:
        return {"type": self.type, "amplitude": self.amplitude, "period": self.period}


@dataclass(frozen=True)
class LangevinSpec:
    """Dynamics and sampling parameters for one Ulam estimate."""

    potential: str = "triple_well"
    sigma: float = 1.0
    tau: float = 0.3
    euler_dt: float = 0.01
    samples_per_cell: int = 10_000
    forcing: Optional[CirculationForcing] = None
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.potential not in POTENTIALS:
            raise ValidationError(
                f"Unknown potential {self.potential!r}; known: {', '.join(sorted(POTENTIALS))}."
            )
        if self.sigma <= 0 or self.tau <= 0:
            raise ValidationError("sigma and tau must be positive.")
        if not 0 < self.euler_dt <= self.tau:
            raise ValidationError(f"euler_dt must lie in (0, tau], got {self.euler_dt}.")
        if self.samples_per_cell < 1:
            raise ValidationError("samples_per_cell must be >= 1.")

    def evaluate(self, x, y):
        return POTENTIALS[self.potential](x, y, self.params)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LangevinSpec":
        forcing = data.get("forcing")
        known = {"potential", "sigma", "tau", "euler_dt", "samples_per_cell", "params"}
        unknown = set(data) - known - {"forcing"}
        if unknown:
            raise ValidationError(f"Unknown Langevin fields: {sorted(unknown)}.")
        kwargs = {k: data[k] for k in known if k in data}
        if forcing is not None:
            kwargs["forcing"] = CirculationForcing(**forcing)
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "potential": self.potential,
            "params": dict(self.params),
            "sigma": self.sigma,
            "tau": self.tau,
            "euler_dt": self.euler_dt,
            "samples_per_cell": self.samples_per_cell,
            "forcing": None if self.forcing is None else self.forcing.to_dict(),
        }


def boltzmann_density(grid: UlamGrid, spec: LangevinSpec) -> np.ndarray:
    """``exp(-2 V / sigma^2)`` at the cell midpoints, normalized over the cells."""
    if spec.forcing is not None and spec.forcing.amplitude != 0:
        raise PreconditionError("The Boltzmann density only describes unforced dynamics.")
    centers = grid.centers()
    value, _, _ = spec.evaluate(centers[:, 0], centers[:, 1])
    exponent = -2.0 * (value - value.min()) / spec.sigma**2
    weights = np.exp(exponent)
    return weights / weights.sum()


# =============================================================================
# Transition matrices
# =============================================================================


def _sample_cell(
    grid: UlamGrid, spec: LangevinSpec, start_phase: float, seed: int, key: Tuple[int, ...]
) -> Tuple[np.ndarray, np.ndarray]:
    """Columns and probabilities of one matrix row."""
    cell = key[-1]
    rng = make_generator(seed, *key)
    x0, x1, y0, y1 = grid.cell_bounds(cell)
    count = spec.samples_per_cell
    x = x0 + (x1 - x0) * rng.random(count)
    y = y0 + (y1 - y0) * rng.random(count)

    n_steps = max(1, int(round(spec.tau / spec.euler_dt)))
    dt = spec.tau / n_steps
    noise = spec.sigma * math.sqrt(dt)
    for s in range(n_steps):
        _, gx, gy = spec.evaluate(x, y)
        drift_x, drift_y = -gx, -gy
        if spec.forcing is not None:
            fx, fy = spec.forcing(x, y, start_phase + s * dt)
            drift_x = drift_x + fx
            drift_y = drift_y + fy
        x = x + drift_x * dt + noise * rng.standard_normal(count)
        y = y + drift_y * dt + noise * rng.standard_normal(count)

    targets = grid.locate(x, y)
    cols, hits = np.unique(targets, return_counts=True)
    return cols, hits / count


def estimate_transition_matrix(
    grid: UlamGrid,
    spec: LangevinSpec,
    start_phase: float = 0.0,
    seed: int = 0,
    *,
    stream: Tuple[int, ...] = (),
    workers: Optional[int] = None,
    tolerances: Optional[Tolerances] = None,
) -> TransitionMatrix:
    """Monte Carlo estimate of the Ulam matrix over ``[start_phase, start_phase + tau]``.

    Cell ``i`` draws from the stream ``(seed, *stream, i)``, so the matrix does
    not depend on the worker count or cell order.
    """
    rows = map_ordered(
        lambda cell: _sample_cell(grid, spec, start_phase, seed, (*stream, cell)),
        list(range(grid.n_cells)),
        workers,
    )
    indptr = np.zeros(grid.n_cells + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(cols) for cols, _ in rows])
    indices = np.concatenate([cols for cols, _ in rows])
    data = np.concatenate([probs for _, probs in rows])
    matrix = sp.csr_matrix((data, indices, indptr), shape=(grid.n_cells, grid.n_cells))
    logger.info(
        "Estimated %d-cell Ulam matrix (phase %.4g, %d samples/cell, nnz %d)",
        grid.n_cells,
        start_phase,
        spec.samples_per_cell,
        matrix.nnz,
    )
    return TransitionMatrix.from_array(matrix, tolerances)


def build_periodic_family(
    grid: UlamGrid,
    spec: LangevinSpec,
    period_slices: int,
    seed: int = 0,
    *,
    workers: Optional[int] = None,
    tolerances: Optional[Tolerances] = None,
) -> List[TransitionMatrix]:
    """``P_0 .. P_{M-1}`` with ``P_m`` estimated from phase ``m * tau``."""
    if spec.forcing is None:
        raise PreconditionError("A periodic family needs a forcing with a period.")
    if period_slices < 1:
        raise ValidationError(f"The number of slices must be >= 1, got {period_slices}.")
    if abs(spec.forcing.period - period_slices * spec.tau) > PERIOD_TOLERANCE:
        raise PreconditionError(
            f"Forcing period {spec.forcing.period!r} != M * tau = {period_slices} * {spec.tau!r}."
        )
    return [
        estimate_transition_matrix(
            grid, spec, m * spec.tau, seed, stream=(m,), workers=workers, tolerances=tolerances
        )
        for m in range(period_slices)
    ]


# =============================================================================
# Geometry helpers
# =============================================================================


def cells_in_disk(grid: UlamGrid, center: Sequence[float], radius: float) -> FrozenSet[int]:
    """All cells whose midpoint lies in the closed disk."""
    if radius <= 0:
        raise ValidationError(f"Disk radius must be positive, got {radius}.")
    centers = grid.centers()
    dist2 = (centers[:, 0] - center[0]) ** 2 + (centers[:, 1] - center[1]) ** 2
    cells = frozenset(int(i) for i in np.flatnonzero(dist2 <= radius**2))
    if not cells:
        raise ValidationError(
            f"No cell midpoint within {radius} of ({center[0]}, {center[1]}); "
            "A and B must be non-empty."
        )
    return cells


def current_vector_field(grid: UlamGrid, effective: sp.spmatrix) -> np.ndarray:
    """Per cell ``sum_{j != i} f+_ij e_ij`` with ``e_ij`` the unit vector between midpoints."""
    centers = grid.centers()
    coo = sp.coo_matrix(effective)
    off = coo.row != coo.col
    rows, cols, vals = coo.row[off], coo.col[off], coo.data[off]
    delta = centers[cols] - centers[rows]
    unit = delta / np.linalg.norm(delta, axis=1)[:, None]
    field_ = np.zeros((grid.n_cells, 2))
    np.add.at(field_, rows, vals[:, None] * unit)
    return field_


def line_crossing_current(
    grid: UlamGrid, effective: sp.spmatrix, x_line: float = 0.0, split_y: float = 0.6
) -> Tuple[float, float]:
    """Net effective current crossing ``x = x_line`` left to right, below and above ``split_y``.

    The crossing height of a jump is where the segment between the two cell
    midpoints meets the line.
    """
    centers = grid.centers()
    coo = sp.coo_matrix(effective)
    xi, yi = centers[coo.row, 0], centers[coo.row, 1]
    xj, yj = centers[coo.col, 0], centers[coo.col, 1]
    rightward = (xi < x_line) & (xj >= x_line)
    leftward = (xi >= x_line) & (xj < x_line)
    crossing = rightward | leftward
    with np.errstate(divide="ignore", invalid="ignore"):
        share = np.where(crossing, (x_line - xi) / (xj - xi), 0.0)
    height = yi + share * (yj - yi)
    signed = np.where(rightward, coo.data, np.where(leftward, -coo.data, 0.0))
    below = float(signed[crossing & (height < split_y)].sum())
    above = float(signed[crossing & (height >= split_y)].sum())
    return below, above


@dataclass(frozen=True)
class ChannelCurrents:
    """Effective current through ``x = x_line``, split into the channels below and above
    ``split_y``. Slices without a current (the last finite slice) are ``None``."""

    x_line: float
    split_y: float
    below: Tuple[Optional[float], ...]
    above: Tuple[Optional[float], ...]

    @property
    def centre(self) -> int:
        return (len(self.below) - 1) // 2

    @property
    def dominant(self) -> str:
        """``"lower"`` or ``"upper"``: the larger channel at the centre slice."""
        k = self.centre
        return "lower" if self.below[k] > self.above[k] else "upper"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "x_line": self.x_line,
            "split_y": self.split_y,
            "centre_slice": self.centre,
            "dominant": self.dominant,
            "slices": [
                {"slice": k, "below": lo, "above": hi}
                for k, (lo, hi) in enumerate(zip(self.below, self.above))
            ],
        }


def channel_currents(
    grid: UlamGrid,
    effective: Sequence[Optional[sp.spmatrix]],
    x_line: float = 0.0,
    split_y: float = 0.6,
) -> ChannelCurrents:
    """:func:`line_crossing_current` for every slice of an effective-current family."""
    below: List[Optional[float]] = []
    above: List[Optional[float]] = []
    for f in effective:
        lo, hi = (None, None) if f is None else line_crossing_current(grid, f, x_line, split_y)
        below.append(lo)
        above.append(hi)
    return ChannelCurrents(x_line, split_y, tuple(below), tuple(above))
