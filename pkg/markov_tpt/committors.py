"""Forward and backward committors for every regime.

For ``i`` in the transition region ``C`` the forward committor ``q+`` is the
probability of next hitting ``B`` before ``A``; the backward committor ``q-``
is the probability of having last come from ``A`` rather than ``B``. On the
boundary ``q+ = 1_B`` and ``q- = 1_A`` at every time slice.

- stationary: one ``|C| x |C|`` sparse LU solve per direction;
- periodic: the ``|C| M`` augmented system (default) or the composed
  one-period ("stacked") system followed by propagation;
- finite-time: exact backward/forward sweeps from the window ends;
- regime switching: the stationary solve on the regime-augmented space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order
from scipy.sparse.linalg import splu

from markov_tpt.chains import (
    AbSets,
    ChainSpec,
    DensityFamily,
    Diagnostic,
    FiniteTimeChain,
    PeriodicChain,
    StationaryChain,
    TransitionMatrix,
    is_irreducible,
    period_product_support,
    periodic_stationary_family,
    propagate_density,
    recurrent_distribution,
    reverse_transitions,
    stationary_distribution,
)
from markov_tpt.config import Tolerances, resolve
from markov_tpt.errors import PreconditionError, SolverFailure, ValidationError

logger = logging.getLogger(__name__)

PERIODIC_METHODS = ("augmented", "stacked")


@dataclass(frozen=True, eq=False)
class CommittorField:
    """Committor vectors per time slice (1, M or N slices)."""

    regime: str
    forward: Tuple[np.ndarray, ...]
    backward: Tuple[np.ndarray, ...]
    residuals: Dict[str, float] = field(default_factory=dict)

    @property
    def n_slices(self) -> int:
        return len(self.forward)


@dataclass(frozen=True, eq=False)
class SwitchingSpec:
    """``M`` regimes, switched by the row-stochastic ``M x M`` matrix ``P-hat``.

    A step from ``(i, m)`` moves ``i -> j`` with ``P_m`` and then switches the
    regime ``m -> m'`` with ``P-hat[m, m']``. The deterministic cyclic shift
    ``P-hat[m, m+1 mod M] = 1`` reproduces the periodic regime.
    """

    regimes: Tuple[TransitionMatrix, ...]
    regime_transition: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "regimes", tuple(self.regimes))
        switch = np.array(self.regime_transition, dtype=float)
        switch.setflags(write=False)
        object.__setattr__(self, "regime_transition", switch)

    @property
    def n_regimes(self) -> int:
        return len(self.regimes)

    @property
    def n_states(self) -> int:
        return self.regimes[0].n_states

    def diagnostics(self, tolerances: Optional[Tolerances] = None) -> List[Diagnostic]:
        tol = resolve(tolerances)
        found: List[Diagnostic] = []
        m = self.n_regimes
        switch = self.regime_transition
        if m == 0:
            return [Diagnostic("period_empty", "a switching spec needs at least one regime")]
        if switch.shape != (m, m):
            found.append(
                Diagnostic(
                    "shape_mismatch",
                    f"regime transition matrix has shape {switch.shape}, expected {(m, m)}",
                    where="regime_transition",
                )
            )
        else:
            if np.any(switch < 0):
                found.append(
                    Diagnostic(
                        "negative_entry", "regime transition has negative entries",
                        where="regime_transition",
                    )
                )
            if np.any(np.abs(switch.sum(axis=1) - 1.0) > tol.row_sum):
                found.append(
                    Diagnostic(
                        "row_not_stochastic", "row not stochastic: regime transition",
                        where="regime_transition",
                    )
                )
        for k, regime in enumerate(self.regimes):
            if regime.n_states != self.n_states:
                found.append(
                    Diagnostic(
                        "shape_mismatch",
                        f"regime has {regime.n_states} states, expected {self.n_states}",
                        where=f"regimes[{k}]",
                    )
                )
        return found

    def augmented_matrix(self, tolerances: Optional[Tolerances] = None) -> TransitionMatrix:
        """Block matrix with block ``(m, m')`` equal to ``P-hat[m, m'] * P_m``."""
        n = self.n_states
        blocks = [
            [
                self.regime_transition[m, k] * regime.csr()
                if self.regime_transition[m, k] != 0
                else sp.csr_matrix((n, n))
                for k in range(self.n_regimes)
            ]
            for m, regime in enumerate(self.regimes)
        ]
        return TransitionMatrix.from_array(sp.bmat(blocks, format="csr"), tolerances)


# =============================================================================
# Shared linear-algebra helpers
# =============================================================================


def _solve_sparse(system: sp.spmatrix, rhs: np.ndarray) -> np.ndarray:
    if system.shape[0] == 0:
        return np.zeros(0)
    try:
        return splu(sp.csc_matrix(system)).solve(rhs)
    except RuntimeError as e:
        raise SolverFailure(f"Committor system is singular: {e}")


def _clip(values: np.ndarray, tol: Tolerances, label: str) -> np.ndarray:
    """Clip roundoff outside [0, 1]; larger violations are hard errors."""
    if values.size == 0:
        return values
    low, high = float(values.min()), float(values.max())
    if low < -tol.committor_clip or high > 1.0 + tol.committor_clip:
        raise SolverFailure(
            f"{label} committor leaves [0, 1] beyond roundoff (range {low!r} .. {high!r})",
            {"min": low, "max": high},
        )
    excess = max(-low, high - 1.0)
    if excess > 0.5 * tol.committor_clip:
        logger.warning("Clipping %s committor back into [0, 1] (excess %.3e)", label, excess)
    return np.clip(values, 0.0, 1.0)


def _check_residual(residual: float, tol: Tolerances, label: str) -> float:
    if residual > tol.committor_residual:
        raise SolverFailure(
            f"{label} committor residual {residual:.3e} exceeds {tol.committor_residual:.1e}",
            {"residual": residual},
        )
    logger.debug("%s committor residual %.3e", label, residual)
    return residual


def _spectral_radius_estimate(restricted: sp.csr_matrix, steps: int = 500) -> float:
    vector = np.ones(restricted.shape[0])
    estimate = 0.0
    for _ in range(steps):
        vector = restricted @ vector
        estimate = float(vector.max())
        if estimate == 0.0:
            return 0.0
        vector /= estimate
    return estimate


def _check_contractive(matrix: TransitionMatrix, c: np.ndarray, boundary: np.ndarray) -> None:
    """Every state of ``C`` must reach ``boundary``; otherwise ``I - P|_C`` is singular."""
    size = len(c)
    if size == 0:
        return
    restricted = matrix.block(c, c)
    exits = np.flatnonzero(matrix.into(c, boundary) > 0)
    coo = restricted.tocoo()
    rows = np.concatenate([coo.row, exits])
    cols = np.concatenate([coo.col, np.full(len(exits), size)])
    graph = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(size + 1, size + 1))
    reached = breadth_first_order(graph.T.tocsr(), size, directed=True, return_predecessors=False)
    if len(reached) < size + 1:
        radius = _spectral_radius_estimate(restricted)
        raise SolverFailure(
            f"Restricted dynamics are not contractive (spectral radius ~ {radius:.12f}): "
            f"{size + 1 - len(reached)} states of C never reach A or B",
            {"spectral_radius": radius},
        )


def _hitting_solve(
    matrix: TransitionMatrix,
    c: np.ndarray,
    target: np.ndarray,
    n_states: int,
    tol: Tolerances,
    label: str,
) -> Tuple[np.ndarray, float]:
    """Solve ``(I - P|_{C->C}) q_C = P|_{C->target} 1`` with ``q = 1`` on ``target``."""
    q = np.zeros(n_states)
    q[target] = 1.0
    if len(c) == 0:
        return q, 0.0
    restricted = matrix.block(c, c)
    rhs = matrix.into(c, target)
    system = sp.identity(len(c), format="csc") - restricted.tocsc()
    values = _solve_sparse(system, rhs)
    residual = float(np.max(np.abs(values - restricted @ values - rhs)))
    _check_residual(residual, tol, label)
    q[c] = _clip(values, tol, label)
    return q, residual


# =============================================================================
# Stationary
# =============================================================================


def solve_stationary(
    matrix: TransitionMatrix,
    sets: AbSets,
    *,
    pi: Optional[np.ndarray] = None,
    tolerances: Optional[Tolerances] = None,
) -> CommittorField:
    """Committors of an irreducible stationary chain."""
    tol = resolve(tolerances)
    if not is_irreducible(matrix):
        raise PreconditionError("Stationary committors need an irreducible transition matrix.")
    n = matrix.n_states
    a, b, c = sets.split(n)
    if pi is None:
        pi = stationary_distribution(matrix, tolerances=tol)
    (backward_matrix,) = reverse_transitions(
        StationaryChain(matrix), DensityFamily((pi,)), tolerances=tol
    )
    forward, forward_residual = _hitting_solve(matrix, c, b, n, tol, "forward")
    backward, backward_residual = _hitting_solve(backward_matrix, c, a, n, tol, "backward")
    logger.info("Solved stationary committors on %d transition states", len(c))
    return CommittorField(
        "stationary",
        (forward,),
        (backward,),
        {"forward": forward_residual, "backward": backward_residual},
    )


# =============================================================================
# Periodic
# =============================================================================


def _periodic_residual(
    restricted: Sequence[sp.csr_matrix],
    offsets: Sequence[np.ndarray],
    values: Sequence[np.ndarray],
    step: int,
) -> float:
    period = len(restricted)
    worst = 0.0
    for m in range(period):
        partner = values[(m + step) % period]
        diff = values[m] - restricted[m] @ partner - offsets[m]
        if diff.size:
            worst = max(worst, float(np.max(np.abs(diff))))
    return worst


def _augmented_values(
    restricted: Sequence[sp.csr_matrix], offsets: Sequence[np.ndarray], step: int
) -> List[np.ndarray]:
    """Solve ``(I - P~_Aug) q~ = b~`` with block ``(m, m+step)`` equal to ``restricted[m]``."""
    period = len(restricted)
    size = restricted[0].shape[0]
    blocks: List[List[Optional[sp.csr_matrix]]] = [[None] * period for _ in range(period)]
    for m in range(period):
        blocks[m][(m + step) % period] = restricted[m]
    augmented = sp.bmat(blocks, format="csc")
    system = sp.identity(size * period, format="csc") - augmented
    solution = _solve_sparse(system, np.concatenate(offsets))
    return [solution[m * size : (m + 1) * size] for m in range(period)]


def _stacked_values(
    restricted: Sequence[sp.csr_matrix], offsets: Sequence[np.ndarray], step: int
) -> List[np.ndarray]:
    """Compose one period into ``q_0 = G q_0 + h``, solve it, then propagate.

    ``step=+1`` is the forward recursion ``q_m = R_m q_{m+1} + o_m``;
    ``step=-1`` is the backward recursion ``q_m = R_m q_{m-1} + o_m``.
    """
    period = len(restricted)
    size = restricted[0].shape[0]
    dense = [r.toarray() for r in restricted]
    order = range(period - 1, -1, -1) if step == 1 else [m % period for m in range(1, period + 1)]
    composed = np.eye(size)
    shift = np.zeros(size)
    for m in order:
        composed = dense[m] @ composed
        shift = dense[m] @ shift + offsets[m]
    try:
        first = np.linalg.solve(np.eye(size) - composed, shift)
    except np.linalg.LinAlgError as e:
        raise SolverFailure(f"Composed periodic committor system is singular: {e}")

    values: List[Optional[np.ndarray]] = [None] * period
    values[0] = first
    propagate = range(period - 1, 0, -1) if step == 1 else range(1, period)
    for m in propagate:
        values[m] = dense[m] @ values[(m + step) % period] + offsets[m]
    return values  # type: ignore[return-value]


def _periodic_direction(
    matrices: Sequence[TransitionMatrix],
    c: np.ndarray,
    target: np.ndarray,
    n_states: int,
    step: int,
    method: str,
    tol: Tolerances,
    label: str,
) -> Tuple[Tuple[np.ndarray, ...], float]:
    period = len(matrices)
    slices = [np.zeros(n_states) for _ in range(period)]
    for q in slices:
        q[target] = 1.0
    if len(c) == 0:
        return tuple(slices), 0.0
    restricted = [matrix.block(c, c) for matrix in matrices]
    offsets = [matrix.into(c, target) for matrix in matrices]
    if method == "augmented":
        values = _augmented_values(restricted, offsets, step)
    else:
        values = _stacked_values(restricted, offsets, step)
    residual = _check_residual(_periodic_residual(restricted, offsets, values, step), tol, label)
    for q, v in zip(slices, values):
        q[c] = _clip(v, tol, label)
    return tuple(slices), residual


def solve_periodic(
    matrices: Sequence[TransitionMatrix],
    sets: AbSets,
    method: str = "augmented",
    *,
    family: Optional[DensityFamily] = None,
    tolerances: Optional[Tolerances] = None,
) -> CommittorField:
    """Committors ``q+_m``, ``q-_m`` of an M-periodic chain, ``m = 0 .. M-1``."""
    tol = resolve(tolerances)
    matrices = tuple(matrices)
    if method not in PERIODIC_METHODS:
        raise ValidationError(
            f"Unknown periodic method {method!r}; expected one of {', '.join(PERIODIC_METHODS)}."
        )
    if len(matrices) == 1:
        single = solve_stationary(
            matrices[0], sets, pi=None if family is None else family[0], tolerances=tol
        )
        return CommittorField("periodic", single.forward, single.backward, single.residuals)

    if not is_irreducible(period_product_support(matrices)):
        raise PreconditionError(
            "Periodic committors need P_0 ... P_{M-1} to be irreducible."
        )
    if family is None:
        family = periodic_stationary_family(matrices, tolerances=tol)
    backward_matrices = reverse_transitions(PeriodicChain(matrices), family, tolerances=tol)

    n = matrices[0].n_states
    a, b, c = sets.split(n)
    forward, forward_residual = _periodic_direction(
        matrices, c, b, n, +1, method, tol, "forward"
    )
    backward, backward_residual = _periodic_direction(
        backward_matrices, c, a, n, -1, method, tol, "backward"
    )
    logger.info("Solved periodic committors (M=%d, method=%s)", len(matrices), method)
    return CommittorField(
        "periodic", forward, backward, {"forward": forward_residual, "backward": backward_residual}
    )


# =============================================================================
# Finite time
# =============================================================================


def solve_finite(
    spec: FiniteTimeChain,
    sets: AbSets,
    *,
    densities: Optional[DensityFamily] = None,
    tolerances: Optional[Tolerances] = None,
) -> CommittorField:
    """Committors on the window ``{0 .. N-1}`` by exact sweeps.

    ``q+(N-1) = 1_B`` and ``q-(0) = 1_A``. A transition state with zero
    density at slice ``n`` has ``q-(n) = 0`` (its backward row is zero).
    """
    tol = resolve(tolerances)
    if not isinstance(spec, FiniteTimeChain):
        raise PreconditionError(f"solve_finite needs a finite-time chain, got {spec.regime}.")
    if spec.horizon < 2:
        raise ValidationError("A finite-time window needs horizon N >= 2.")
    if densities is None:
        densities = propagate_density(spec)
    backward_matrices = reverse_transitions(spec, densities, tolerances=tol)

    n = spec.n_states
    horizon = spec.horizon
    a, b, _ = sets.split(n)

    forward: List[Optional[np.ndarray]] = [None] * horizon
    forward[-1] = sets.indicator_b(n)
    for k in range(horizon - 2, -1, -1):
        q = spec.matrices[k].apply(forward[k + 1])
        q[a] = 0.0
        q[b] = 1.0
        forward[k] = _clip(q, tol, "forward")

    backward: List[Optional[np.ndarray]] = [None] * horizon
    backward[0] = sets.indicator_a(n)
    for k in range(1, horizon):
        q = backward_matrices[k - 1].apply(backward[k - 1])
        q[a] = 1.0
        q[b] = 0.0
        backward[k] = _clip(q, tol, "backward")

    logger.info("Solved finite-time committors (N=%d)", horizon)
    return CommittorField(
        "finite", tuple(forward), tuple(backward), {"forward": 0.0, "backward": 0.0}
    )


def window_committors(
    matrix: TransitionMatrix,
    pi: np.ndarray,
    sets: AbSets,
    length: int,
    *,
    tolerances: Optional[Tolerances] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Committors at the centre slice of a stationary window of ``length`` time points.

    The window ``{-N .. N}`` has length ``2N + 1`` and centre ``0``. A window
    of length 1 has only boundary conditions: ``(1_B, 1_A)``.
    """
    if length < 1:
        raise ValidationError(f"Window length must be >= 1, got {length}.")
    n = matrix.n_states
    if length == 1:
        return sets.indicator_b(n), sets.indicator_a(n)
    chain = FiniteTimeChain((matrix,) * (length - 1), pi)
    committors = solve_finite(chain, sets, tolerances=tolerances)
    centre = (length - 1) // 2
    return committors.forward[centre], committors.backward[centre]


# =============================================================================
# Regime switching
# =============================================================================


def solve_switching(
    spec: SwitchingSpec, sets: AbSets, *, tolerances: Optional[Tolerances] = None
) -> CommittorField:
    """Committors on the regime-augmented space ``S x {0 .. M-1}``, one slice per regime.

    The forward committor needs only a contractive restricted system. The
    backward committor reverses the augmented chain in a stationary law that is
    positive on each closed class, so no transition state may be transient.
    """
    tol = resolve(tolerances)
    errors = [d for d in spec.diagnostics(tol) if d.severity == "error"]
    if errors:
        raise ValidationError(
            "Invalid switching spec: " + "; ".join(d.message for d in errors), errors
        )
    n = spec.n_states
    period = spec.n_regimes
    augmented = spec.augmented_matrix(tol)
    lifted = AbSets(
        {m * n + i for m in range(period) for i in sets.set_a},
        {m * n + i for m in range(period) for i in sets.set_b},
    )
    a, b, c = lifted.split(n * period)
    boundary = np.concatenate([a, b])

    _check_contractive(augmented, c, boundary)
    forward, forward_residual = _hitting_solve(augmented, c, b, n * period, tol, "forward")

    pi = recurrent_distribution(augmented, tolerances=tol)
    transient = c[pi[c] <= 0]
    if transient.size:
        raise PreconditionError(
            "Transition states are transient in the regime-augmented chain; "
            "backward committors are undefined there.",
            {"transient": transient[:10].tolist()},
        )
    (backward_matrix,) = reverse_transitions(
        StationaryChain(augmented), DensityFamily((pi,)), tolerances=tol
    )
    backward, backward_residual = _hitting_solve(backward_matrix, c, a, n * period, tol, "backward")

    logger.info("Solved switching committors (%d regimes)", period)
    return CommittorField(
        "switching",
        tuple(forward[m * n : (m + 1) * n] for m in range(period)),
        tuple(backward[m * n : (m + 1) * n] for m in range(period)),
        {"forward": forward_residual, "backward": backward_residual},
    )


# =============================================================================
# Dispatch
# =============================================================================


def solve(
    spec: ChainSpec,
    sets: AbSets,
    *,
    method: str = "augmented",
    densities: Optional[DensityFamily] = None,
    tolerances: Optional[Tolerances] = None,
) -> CommittorField:
    """Committors for any chain spec."""
    if isinstance(spec, StationaryChain):
        pi = None if densities is None else densities[0]
        return solve_stationary(spec.matrix, sets, pi=pi, tolerances=tolerances)
    if isinstance(spec, PeriodicChain):
        return solve_periodic(
            spec.matrices, sets, method, family=densities, tolerances=tolerances
        )
    return solve_finite(spec, sets, densities=densities, tolerances=tolerances)
