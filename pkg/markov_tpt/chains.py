"""Markov chains in the stationary, periodic and finite-time regimes.

A chain is one of three immutable specs:

- :class:`StationaryChain`: a single irreducible transition matrix ``P``.
- :class:`PeriodicChain`: ``M`` matrices ``P_0 .. P_{M-1}`` applied cyclically.
- :class:`FiniteTimeChain`: ``N-1`` matrices ``P(0) .. P(N-2)`` on the window
  ``{0, .., N-1}`` together with the initial density ``lambda(0)``.

Densities per time slice are a :class:`DensityFamily`: ``(pi,)`` for the
stationary chain, the M-stationary family ``(pi_0 .. pi_{M-1})`` for the
periodic chain and ``(lambda(0) .. lambda(N-1))`` for the finite window.

Matrices are stored as ``scipy.sparse`` CSR when fewer than a quarter of the
entries are non-zero (Ulam matrices) and as dense ``numpy`` arrays otherwise
(toy networks). Nothing downstream depends on the storage choice.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, ClassVar, FrozenSet, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from markov_tpt.config import Tolerances, resolve
from markov_tpt.errors import PreconditionError, SolverFailure, ValidationError

logger = logging.getLogger(__name__)

Matrix = Union[np.ndarray, sp.csr_matrix]


# =============================================================================
# Transition matrices
# =============================================================================


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """One time slice of dynamics: ``entries[i, j] = P(X_{n+1}=j | X_n=i)``.

    Construction does not validate; :func:`validate_chain` reports violations
    as diagnostics so malformed input can be described rather than rejected.
    """

    entries: Matrix

    @classmethod
    def from_array(cls, entries, tolerances: Optional[Tolerances] = None) -> "TransitionMatrix":
        threshold = resolve(tolerances).sparse_density
        if sp.issparse(entries):
            mat = sp.csr_matrix(entries, dtype=float)
            mat.sum_duplicates()
            mat.eliminate_zeros()
            shape = mat.shape
            nnz = mat.nnz
        else:
            arr = np.array(entries, dtype=float)
            if arr.ndim != 2:
                raise ValidationError(f"A transition matrix must be 2-D, got shape {arr.shape}.")
            shape = arr.shape
            nnz = int(np.count_nonzero(arr))
        if shape[0] != shape[1] or shape[0] == 0:
            raise ValidationError(f"A transition matrix must be square and non-empty, got {shape}.")

        if nnz < threshold * shape[0] * shape[1]:
            stored: Matrix = mat if sp.issparse(entries) else sp.csr_matrix(arr)
        else:
            stored = mat.toarray() if sp.issparse(entries) else arr
            stored.setflags(write=False)
        return cls(stored)

    @property
    def n_states(self) -> int:
        return int(self.entries.shape[0])

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.entries)

    def dense(self) -> np.ndarray:
        if self.is_sparse:
            return self.entries.toarray()
        return self.entries

    def csr(self) -> sp.csr_matrix:
        if self.is_sparse:
            return self.entries
        return sp.csr_matrix(self.entries)

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.entries.sum(axis=1)).ravel()

    def min_entry(self) -> float:
        if self.is_sparse:
            return float(self.entries.data.min()) if self.entries.nnz else 0.0
        return float(self.entries.min())

    def support(self) -> sp.csr_matrix:
        """0/1 adjacency of the positive entries."""
        mat = self.csr().copy()
        mat.data = (mat.data > 0).astype(float)
        mat.eliminate_zeros()
        return mat

    def push(self, density: np.ndarray) -> np.ndarray:
        """Row-vector product ``density^T P``."""
        return np.asarray(self.entries.T @ density).ravel()

    def apply(self, vector: np.ndarray) -> np.ndarray:
        """Column-vector product ``P vector``."""
        return np.asarray(self.entries @ vector).ravel()

    def block(self, rows: np.ndarray, cols: np.ndarray) -> sp.csr_matrix:
        """The sub-matrix ``P|_{rows -> cols}`` as CSR."""
        if self.is_sparse:
            return self.entries[rows, :][:, cols].tocsr()
        return sp.csr_matrix(self.entries[np.ix_(rows, cols)])

    def into(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Row sums of ``P|_{rows -> cols}``: the one-step probability of entering ``cols``."""
        if len(cols) == 0:
            return np.zeros(len(rows))
        return np.asarray(self.block(rows, cols).sum(axis=1)).ravel()


# =============================================================================
# Diagnostics, sets and chain specs
# =============================================================================


@dataclass(frozen=True)
class Diagnostic:
    """One violated invariant, as reported by :func:`validate_chain`."""

    code: str
    message: str
    severity: str = "error"  # "error" | "warning" | "info"
    where: str = ""

    def to_dict(self) -> dict:
        return {
            "code": self.code,
            "message": self.message,
            "severity": self.severity,
            "where": self.where,
        }


@dataclass(frozen=True)
class AbSets:
    """The source set ``A`` and target set ``B``; ``C`` is their complement."""

    set_a: FrozenSet[int]
    set_b: FrozenSet[int]

    def __post_init__(self):
        object.__setattr__(self, "set_a", frozenset(int(i) for i in self.set_a))
        object.__setattr__(self, "set_b", frozenset(int(i) for i in self.set_b))

    def split(self, n_states: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Sorted index arrays ``(A, B, C)``."""
        a = np.array(sorted(self.set_a), dtype=int)
        b = np.array(sorted(self.set_b), dtype=int)
        boundary = self.set_a | self.set_b
        c = np.array([i for i in range(n_states) if i not in boundary], dtype=int)
        return a, b, c

    def indicator_a(self, n_states: int) -> np.ndarray:
        out = np.zeros(n_states)
        out[sorted(self.set_a)] = 1.0
        return out

    def indicator_b(self, n_states: int) -> np.ndarray:
        out = np.zeros(n_states)
        out[sorted(self.set_b)] = 1.0
        return out

    def diagnostics(self, n_states: int) -> List[Diagnostic]:
        found: List[Diagnostic] = []
        for name, members in (("A", self.set_a), ("B", self.set_b)):
            if not members:
                found.append(Diagnostic("empty_set", f"set {name} is empty", where=f"set_{name}"))
            bad = sorted(i for i in members if i < 0 or i >= n_states)
            if bad:
                found.append(
                    Diagnostic(
                        "state_out_of_range",
                        f"set {name} references states {bad} outside 0..{n_states - 1}",
                        where=f"set_{name}",
                    )
                )
        overlap = sorted(self.set_a & self.set_b)
        if overlap:
            found.append(Diagnostic("sets_overlap", f"A and B share states {overlap}"))
        if not found and len(self.set_a | self.set_b) >= n_states:
            found.append(
                Diagnostic(
                    "transition_region_empty",
                    "A and B cover every state; the transition region C is empty",
                    severity="warning",
                )
            )
        return found


@dataclass(frozen=True, eq=False)
class StationaryChain:
    matrix: TransitionMatrix

    regime: ClassVar[str] = "stationary"

    @property
    def matrices(self) -> Tuple[TransitionMatrix, ...]:
        return (self.matrix,)

    @property
    def n_states(self) -> int:
        return self.matrix.n_states


@dataclass(frozen=True, eq=False)
class PeriodicChain:
    matrices: Tuple[TransitionMatrix, ...]

    regime: ClassVar[str] = "periodic"

    def __post_init__(self):
        object.__setattr__(self, "matrices", tuple(self.matrices))

    @property
    def period(self) -> int:
        return len(self.matrices)

    @property
    def n_states(self) -> int:
        return self.matrices[0].n_states


@dataclass(frozen=True, eq=False)
class FiniteTimeChain:
    matrices: Tuple[TransitionMatrix, ...]
    initial_density: np.ndarray = field(repr=False)

    regime: ClassVar[str] = "finite"

    def __post_init__(self):
        object.__setattr__(self, "matrices", tuple(self.matrices))
        density = np.array(self.initial_density, dtype=float)
        density.setflags(write=False)
        object.__setattr__(self, "initial_density", density)

    @property
    def horizon(self) -> int:
        """``N``: the number of time points in the window."""
        return len(self.matrices) + 1

    @property
    def n_states(self) -> int:
        if self.matrices:
            return self.matrices[0].n_states
        return len(self.initial_density)


ChainSpec = Union[StationaryChain, PeriodicChain, FiniteTimeChain]


@dataclass(frozen=True, eq=False)
class DensityFamily:
    """Probability vectors indexed by time slice."""

    densities: Tuple[np.ndarray, ...]

    def __post_init__(self):
        frozen = []
        for d in self.densities:
            arr = np.array(d, dtype=float)
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "densities", tuple(frozen))

    def __len__(self) -> int:
        return len(self.densities)

    def __getitem__(self, index: int) -> np.ndarray:
        return self.densities[index]

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.densities)


# =============================================================================
# Validation
# =============================================================================


def _matrix_diagnostics(
    matrix: TransitionMatrix, where: str, tol: Tolerances
) -> List[Diagnostic]:
    found: List[Diagnostic] = []
    if matrix.min_entry() < 0:
        found.append(Diagnostic("negative_entry", "matrix has negative entries", where=where))
    deviation = np.abs(matrix.row_sums() - 1.0)
    bad_rows = np.flatnonzero(deviation > tol.row_sum)
    if bad_rows.size:
        shown = bad_rows[:10].tolist()
        found.append(
            Diagnostic(
                "row_not_stochastic",
                f"row not stochastic: rows {shown} deviate from 1 by up to "
                f"{float(deviation.max()):.3e}",
                where=where,
            )
        )
    return found


def is_irreducible(graph: Union[TransitionMatrix, sp.spmatrix]) -> bool:
    """Strong connectivity of the support graph."""
    support = graph.support() if isinstance(graph, TransitionMatrix) else graph
    if support.shape[0] == 1:
        return True
    n_components, _ = connected_components(support, directed=True, connection="strong")
    return n_components == 1


def period_product_support(matrices: Iterable[TransitionMatrix]) -> sp.csr_matrix:
    """Support of ``P_0 P_1 ... P_{M-1}``, computed on 0/1 matrices to avoid underflow."""
    product: Optional[sp.csr_matrix] = None
    for matrix in matrices:
        step = matrix.support()
        product = step if product is None else (product @ step).tocsr()
        product.data[:] = 1.0
        product.eliminate_zeros()
    if product is None:
        raise ValidationError("A periodic chain needs at least one matrix.")
    return product


def validate_chain(
    spec: ChainSpec,
    sets: Optional[AbSets] = None,
    *,
    tolerances: Optional[Tolerances] = None,
    include_info: bool = False,
) -> List[Diagnostic]:
    """Check every type invariant of ``spec`` (and ``sets``); return the violations.

    The list is empty iff the chain is valid, including the irreducibility gate
    of the committor theorems for the stationary (``P``) and periodic
    (``P_0 ... P_{M-1}``) regimes. The finite-time regime has no such gate;
    with ``include_info=True`` that is reported as an ``info`` diagnostic.
    """
    tol = resolve(tolerances)
    found: List[Diagnostic] = []
    matrices = spec.matrices

    if isinstance(spec, PeriodicChain) and not matrices:
        return [Diagnostic("period_empty", "a periodic chain needs at least one matrix")]
    if isinstance(spec, FiniteTimeChain) and not matrices:
        found.append(
            Diagnostic("horizon_too_short", "a finite-time window needs horizon N >= 2")
        )

    n_states = spec.n_states
    for k, matrix in enumerate(matrices):
        where = f"matrices[{k}]"
        if matrix.n_states != n_states:
            found.append(
                Diagnostic(
                    "shape_mismatch",
                    f"matrix has {matrix.n_states} states, expected {n_states}",
                    where=where,
                )
            )
            continue
        found.extend(_matrix_diagnostics(matrix, where, tol))

    if isinstance(spec, FiniteTimeChain):
        density = spec.initial_density
        if density.shape != (n_states,):
            found.append(
                Diagnostic(
                    "density_length",
                    f"initial density has shape {density.shape}, expected ({n_states},)",
                    where="initial_density",
                )
            )
        else:
            if np.any(density < 0):
                found.append(
                    Diagnostic(
                        "density_negative",
                        "initial density has negative entries",
                        where="initial_density",
                    )
                )
            if abs(float(density.sum()) - 1.0) > tol.initial_density_sum:
                found.append(
                    Diagnostic(
                        "density_not_normalized",
                        f"initial density sums to {float(density.sum())!r}",
                        where="initial_density",
                    )
                )
        if include_info:
            found.append(
                Diagnostic(
                    "irreducibility_not_required",
                    "finite-time windows do not require an irreducible chain; check skipped",
                    severity="info",
                )
            )
    elif not any(d.code == "shape_mismatch" for d in found):
        if isinstance(spec, StationaryChain):
            irreducible = is_irreducible(spec.matrix)
            subject = "P"
        else:
            irreducible = is_irreducible(period_product_support(matrices))
            subject = "P_0 ... P_{M-1}"
        if not irreducible:
            found.append(Diagnostic("not_irreducible", f"not irreducible: {subject}"))

    if sets is not None:
        found.extend(sets.diagnostics(n_states))
    return found


def ensure_valid(
    spec: ChainSpec, sets: Optional[AbSets] = None, *, tolerances: Optional[Tolerances] = None
) -> List[Diagnostic]:
    """Raise :class:`ValidationError` on error diagnostics; return the rest."""
    found = validate_chain(spec, sets, tolerances=tolerances)
    errors = [d for d in found if d.severity == "error"]
    if errors:
        summary = "; ".join(d.message for d in errors[:5])
        raise ValidationError(f"Invalid {spec.regime} chain: {summary}", errors)
    return found


# =============================================================================
# Invariant densities
# =============================================================================


def _dense_invariant(matrix: np.ndarray) -> np.ndarray:
    n = matrix.shape[0]
    system = matrix.T - np.eye(n)
    system[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        pi = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as e:
        raise SolverFailure(f"Dense invariant-density solve failed: {e}")
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def _invariant_density(
    push: Callable[[np.ndarray], np.ndarray],
    n_states: int,
    tol: Tolerances,
    dense_matrix: Callable[[], np.ndarray],
) -> np.ndarray:
    """Fixed point of ``push`` by lazy power iteration from the uniform vector.

    Iterating ``(x + push(x)) / 2`` has the same fixed point and converges for
    periodic chains too.
    """
    pi = np.full(n_states, 1.0 / n_states)
    residual = np.inf
    for iteration in range(tol.stationary_max_iter):
        pushed = push(pi)
        residual = float(np.max(np.abs(pushed - pi)))
        if residual < tol.stationary_residual:
            logger.debug("Power iteration converged after %d steps", iteration)
            return pi
        pi = 0.5 * (pi + pushed)
        pi /= pi.sum()

    if n_states > tol.dense_fallback_max_states:
        raise SolverFailure(
            f"Power iteration did not converge in {tol.stationary_max_iter} steps",
            {"residual": residual},
        )
    logger.warning(
        "Power iteration hit the cap (%d steps, residual %.3e); using a dense solve",
        tol.stationary_max_iter,
        residual,
    )
    pi = _dense_invariant(dense_matrix())
    residual = float(np.max(np.abs(push(pi) - pi)))
    if residual > tol.stationary_accept:
        raise SolverFailure(
            "Invariant density does not satisfy pi^T P = pi^T", {"residual": residual}
        )
    return pi


def stationary_distribution(
    matrix: TransitionMatrix, *, tolerances: Optional[Tolerances] = None
) -> np.ndarray:
    """The unique, strictly positive ``pi`` with ``pi^T P = pi^T``."""
    tol = resolve(tolerances)
    if not is_irreducible(matrix):
        raise PreconditionError(
            "Transition matrix is not irreducible; its invariant distribution is not unique."
        )
    return _invariant_density(matrix.push, matrix.n_states, tol, matrix.dense)


def recurrent_distribution(
    matrix: TransitionMatrix, *, tolerances: Optional[Tolerances] = None
) -> np.ndarray:
    """A stationary law positive on every closed class and zero on transient states.

    Each closed class carries its own invariant density, weighted by the class
    size. For an irreducible matrix this is :func:`stationary_distribution`.
    """
    tol = resolve(tolerances)
    support = matrix.support()
    n_components, labels = connected_components(support, directed=True, connection="strong")
    if n_components == 1:
        return stationary_distribution(matrix, tolerances=tol)
    edges = support.tocoo()
    leaving = labels[edges.row] != labels[edges.col]
    open_classes = set(labels[edges.row[leaving]].tolist())
    pi = np.zeros(matrix.n_states)
    for label in range(n_components):
        if label in open_classes:
            continue
        members = np.flatnonzero(labels == label)
        block = TransitionMatrix.from_array(matrix.block(members, members), tol)
        pi[members] = len(members) * stationary_distribution(block, tolerances=tol)
    logger.debug(
        "Reducible chain: %d classes, %d closed", n_components, n_components - len(open_classes)
    )
    return pi / pi.sum()


def periodic_stationary_family(
    matrices: Iterable[TransitionMatrix], *, tolerances: Optional[Tolerances] = None
) -> DensityFamily:
    """The M-stationary family: ``pi_0`` invariant for ``P_0 ... P_{M-1}``, then pushed forward."""
    tol = resolve(tolerances)
    matrices = tuple(matrices)
    if len(matrices) == 1:
        return DensityFamily((stationary_distribution(matrices[0], tolerances=tol),))
    if not is_irreducible(period_product_support(matrices)):
        raise PreconditionError(
            "The period product P_0 ... P_{M-1} is not irreducible; "
            "the M-stationary family is not unique."
        )

    def push_period(x: np.ndarray) -> np.ndarray:
        for matrix in matrices:
            x = matrix.push(x)
        return x

    def dense_product() -> np.ndarray:
        product = np.array(matrices[0].dense())
        for matrix in matrices[1:]:
            product = product @ matrix.dense()
        return product

    family = [_invariant_density(push_period, matrices[0].n_states, tol, dense_product)]
    for matrix in matrices[:-1]:
        pushed = matrix.push(family[-1])
        family.append(pushed / pushed.sum())
    return DensityFamily(tuple(family))


def propagate_density(spec: FiniteTimeChain) -> DensityFamily:
    """``lambda(n+1)^T = lambda(n)^T P(n)`` for ``n = 0 .. N-2``."""
    if not isinstance(spec, FiniteTimeChain):
        raise PreconditionError(
            f"propagate_density needs a finite-time chain, got {spec.regime}; "
            "use stationary_distribution or periodic_stationary_family instead."
        )
    densities = [np.array(spec.initial_density, dtype=float)]
    for matrix in spec.matrices:
        densities.append(matrix.push(densities[-1]))
    return DensityFamily(tuple(densities))


def densities_for(spec: ChainSpec, *, tolerances: Optional[Tolerances] = None) -> DensityFamily:
    """The density family matching the regime of ``spec``."""
    if isinstance(spec, StationaryChain):
        return DensityFamily((stationary_distribution(spec.matrix, tolerances=tolerances),))
    if isinstance(spec, PeriodicChain):
        return periodic_stationary_family(spec.matrices, tolerances=tolerances)
    return propagate_density(spec)


# =============================================================================
# Time reversal
# =============================================================================


def _reverse(
    matrix: TransitionMatrix,
    before: np.ndarray,
    after: np.ndarray,
    tolerances: Optional[Tolerances] = None,
) -> TransitionMatrix:
    """``P-_ij = before_j P_ji / after_i``; rows with ``after_i = 0`` are all zero."""
    inv = np.zeros(len(after))
    positive = after > 0
    inv[positive] = 1.0 / after[positive]
    if matrix.is_sparse:
        reversed_ = (sp.diags(inv) @ matrix.csr().T @ sp.diags(before)).tocsr()
    else:
        reversed_ = inv[:, None] * matrix.dense().T * before[None, :]
    return TransitionMatrix.from_array(reversed_, tolerances)


def reverse_transitions(
    spec: ChainSpec, densities: DensityFamily, *, tolerances: Optional[Tolerances] = None
) -> Tuple[TransitionMatrix, ...]:
    """Backward transition matrices of the time-reversed chain.

    - stationary: one matrix ``P-``;
    - periodic: ``P-_m`` for ``m = 0 .. M-1``, built from ``P_{m-1}`` (mod M);
    - finite: ``P-(n)`` for ``n = 1 .. N-1``, so element ``k`` is ``P-(k+1)``.
    """
    if isinstance(spec, StationaryChain):
        pi = densities[0]
        return (_reverse(spec.matrix, pi, pi, tolerances),)
    if isinstance(spec, PeriodicChain):
        period = spec.period
        return tuple(
            _reverse(spec.matrices[m - 1], densities[(m - 1) % period], densities[m], tolerances)
            for m in range(period)
        )
    return tuple(
        _reverse(spec.matrices[n - 1], densities[n - 1], densities[n], tolerances)
        for n in range(1, spec.horizon)
    )
