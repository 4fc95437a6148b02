"""Reactive-trajectory statistics.

Given committors and densities per time slice this module computes the
distribution of reactive trajectories ``mu``, its normalization ``mu_hat``,
the reactive current ``f``, the effective current ``f+``, the discrete rates
out of ``A`` and into ``B`` and the regime-level aggregates, plus a report on
the current conservation laws.

Slices that a quantity is not defined on (``mu_hat`` where ``Z = 0``, the
current at the last slice of a finite window, rates outside their admissible
slices, the mean transition time at zero rate) are ``None``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from markov_tpt.chains import (
    AbSets,
    ChainSpec,
    DensityFamily,
    FiniteTimeChain,
    densities_for,
    ensure_valid,
)
from markov_tpt.committors import CommittorField, solve
from markov_tpt.config import Tolerances, resolve
from markov_tpt.errors import SolverFailure, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Aggregates:
    """Regime-level summary.

    ``rate`` / ``rate_in`` are ``k^AB`` (stationary), the period average (periodic)
    or the window average ``k_N`` (finite), computed from the A-outflow and the
    B-inflow respectively. ``reactive_mass`` is ``Z`` averaged the same way and
    ``mean_time`` the ratio ``reactive_mass / rate``.
    """

    regime: str
    rate: float
    rate_in: float
    reactive_mass: float
    mean_time: Optional[float]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "regime": self.regime,
            "rate": self.rate,
            "rate_in": self.rate_in,
            "reactive_mass": self.reactive_mass,
            "mean_time": self.mean_time,
        }


@dataclass(frozen=True, eq=False)
class ReactiveStats:
    regime: str
    mu: Tuple[np.ndarray, ...]
    mu_hat: Tuple[Optional[np.ndarray], ...]
    z: Tuple[float, ...]
    current: Tuple[Optional[sp.csr_matrix], ...]
    effective: Tuple[Optional[sp.csr_matrix], ...]
    rate_out_a: Tuple[Optional[float], ...]
    rate_in_b: Tuple[Optional[float], ...]
    aggregates: Aggregates

    @property
    def n_slices(self) -> int:
        return len(self.mu)

    @property
    def n_states(self) -> int:
        return len(self.mu[0])


@dataclass(frozen=True)
class RateRecord:
    out_a: Tuple[Optional[float], ...]
    in_b: Tuple[Optional[float], ...]
    rate: float
    rate_in: float


@dataclass(frozen=True)
class ConservationReport:
    """Largest violations of the node and boundary conservation laws."""

    regime: str
    node_violation: float
    boundary_violation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.node_violation < self.tolerance and self.boundary_violation < self.tolerance

    def to_dict(self) -> Dict[str, Any]:
        return {
            "regime": self.regime,
            "node_violation": self.node_violation,
            "boundary_violation": self.boundary_violation,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def _regime_of(spec_or_regime) -> str:
    if isinstance(spec_or_regime, str):
        return spec_or_regime
    return spec_or_regime.regime


# =============================================================================
# Distribution
# =============================================================================


def reactive_distribution(
    committors: CommittorField, densities: DensityFamily, sets: AbSets
) -> Tuple[np.ndarray, ...]:
    """``mu_i(n) = q-_i(n) * P(X_n = i) * q+_i(n)``, exactly zero on ``A`` and ``B``."""
    if committors.n_slices != len(densities):
        raise ValidationError(
            f"Committors have {committors.n_slices} slices but densities have {len(densities)}."
        )
    n = len(densities[0])
    a, b, _ = sets.split(n)
    mu = []
    for q_minus, density, q_plus in zip(committors.backward, densities, committors.forward):
        values = q_minus * density * q_plus
        values[a] = 0.0
        values[b] = 0.0
        mu.append(values)
    return tuple(mu)


def reactive_mass(mu: Sequence[np.ndarray]) -> Tuple[float, ...]:
    """``Z(n)``: total reactive mass per slice (``mu`` vanishes off ``C``)."""
    return tuple(float(values.sum()) for values in mu)


def normalize_reactive(mu: Sequence[np.ndarray]) -> Tuple[Optional[np.ndarray], ...]:
    """``mu / Z`` per slice, ``None`` where ``Z = 0``."""
    out: List[Optional[np.ndarray]] = []
    for values, z in zip(mu, reactive_mass(mu)):
        out.append(values / z if z > 0 else None)
    return tuple(out)


# =============================================================================
# Currents
# =============================================================================


def _weighted(matrix: sp.csr_matrix, rows: np.ndarray, cols: np.ndarray) -> sp.csr_matrix:
    current = (sp.diags(rows) @ matrix @ sp.diags(cols)).tocsr()
    current.eliminate_zeros()
    return current


def reactive_current(
    committors: CommittorField, densities: DensityFamily, spec: ChainSpec, sets: AbSets
) -> Tuple[Optional[sp.csr_matrix], ...]:
    """``f_ij(n) = q-_i(n) P(X_n = i) P_ij(n) q+_j(n+1)`` per slice.

    Defined on the single stationary slice, on every periodic slice (``m+1``
    taken mod ``M``) and on ``n = 0 .. N-2`` of a finite window; the last
    finite slice is ``None``.
    """
    if committors.n_slices != len(densities):
        raise ValidationError(
            f"Committors have {committors.n_slices} slices but densities have {len(densities)}."
        )
    matrices = spec.matrices
    slices = committors.n_slices
    out: List[Optional[sp.csr_matrix]] = []
    for k in range(slices):
        if isinstance(spec, FiniteTimeChain) and k == slices - 1:
            out.append(None)
            continue
        following = committors.forward[(k + 1) % slices]
        rows = committors.backward[k] * densities[k]
        out.append(_weighted(matrices[k].csr(), rows, following))
    return tuple(out)


def net_current(current, tolerances: Optional[Tolerances] = None) -> sp.csr_matrix:
    """``f+_ij = max(f_ij - f_ji, 0)`` for one slice."""
    tol = resolve(tolerances)
    f = sp.csr_matrix(current, dtype=float)
    if f.nnz and float(f.data.min()) < -tol.current_clip:
        raise SolverFailure(
            f"Reactive current has negative entries beyond roundoff ({float(f.data.min())!r})",
            {"min": float(f.data.min())},
        )
    f.data = np.maximum(f.data, 0.0)
    net = (f - f.T).tocsr()
    net.data = np.maximum(net.data, 0.0)
    net.eliminate_zeros()
    return net


def effective_current(
    current: Sequence[Optional[sp.csr_matrix]], tolerances: Optional[Tolerances] = None
) -> Tuple[Optional[sp.csr_matrix], ...]:
    """Per-slice effective current; undefined slices stay ``None``."""
    tol = resolve(tolerances)
    return tuple(None if f is None else net_current(f, tol) for f in current)


# =============================================================================
# Rates and aggregates
# =============================================================================


def _outflow(f: sp.csr_matrix, a: np.ndarray) -> float:
    return float(f[a, :].sum()) if len(a) else 0.0


def _inflow(f: sp.csr_matrix, b: np.ndarray) -> float:
    return float(f[:, b].sum()) if len(b) else 0.0


def _ordered_sum(values: Sequence[Optional[float]]) -> float:
    total = 0.0
    for v in values:
        if v is not None:
            total += v
    return total


def rates(current: Sequence[Optional[sp.csr_matrix]], sets: AbSets, regime) -> RateRecord:
    """Discrete rates ``k^{A->}(n)`` and ``k^{->B}(n)`` plus their aggregates.

    ``k^{->B}(n)`` uses the current of the previous slice. In a finite window
    ``k^{A->}`` is defined on ``0 .. N-2`` and ``k^{->B}`` on ``1 .. N-1``;
    both aggregates divide by ``N``.
    """
    regime = _regime_of(regime)
    slices = len(current)
    defined = next(f for f in current if f is not None)
    a, b, _ = sets.split(defined.shape[0])

    if regime == "finite":
        out_a = tuple(
            _outflow(current[k], a) if k <= slices - 2 else None for k in range(slices)
        )
        in_b = tuple(_inflow(current[k - 1], b) if k >= 1 else None for k in range(slices))
    else:
        out_a = tuple(_outflow(f, a) for f in current)
        in_b = tuple(_inflow(current[k - 1], b) for k in range(slices))

    return RateRecord(
        out_a, in_b, _ordered_sum(out_a) / slices, _ordered_sum(in_b) / slices
    )


def _ratio(mass: float, rate: float) -> Optional[float]:
    if rate <= 0.0:
        return None
    return mass / rate


def mean_transition_time(stats: ReactiveStats) -> Optional[float]:
    """``Z / k`` (stationary) or its period/window average; ``None`` at zero rate."""
    return _ratio(stats.aggregates.reactive_mass, stats.aggregates.rate)


def check_conservation(
    stats: ReactiveStats, sets: AbSets, tolerances: Optional[Tolerances] = None
) -> ConservationReport:
    """Max over ``C`` and slices of ``|sum_j f_ij(n) - sum_j f_ji(n-1)|``, and the A/B balance."""
    tol = resolve(tolerances)
    _, _, c = sets.split(stats.n_states)
    current = stats.current
    slices = len(current)

    if stats.regime == "finite":
        pairs = [(k, k - 1) for k in range(1, slices - 1)]
    else:
        pairs = [(k, (k - 1) % slices) for k in range(slices)]

    node = 0.0
    for now, before in pairs:
        if len(c) == 0:
            break
        out_flow = np.asarray(current[now].sum(axis=1)).ravel()[c]
        in_flow = np.asarray(current[before].sum(axis=0)).ravel()[c]
        node = max(node, float(np.max(np.abs(out_flow - in_flow))))

    boundary = abs(_ordered_sum(stats.rate_out_a) - _ordered_sum(stats.rate_in_b))
    report = ConservationReport(stats.regime, node, boundary, tol.conservation)
    if not report.passed:
        logger.warning(
            "Conservation violated: node %.3e, boundary %.3e", node, boundary
        )
    return report


# =============================================================================
# Pipeline
# =============================================================================


def statistics_from(
    spec: ChainSpec,
    sets: AbSets,
    committors: CommittorField,
    densities: DensityFamily,
    tolerances: Optional[Tolerances] = None,
) -> ReactiveStats:
    """Assemble every statistic from already computed committors and densities."""
    tol = resolve(tolerances)
    mu = reactive_distribution(committors, densities, sets)
    z = reactive_mass(mu)
    current = reactive_current(committors, densities, spec, sets)
    record = rates(current, sets, spec.regime)
    mass = _ordered_sum(z) / len(z)
    aggregates = Aggregates(
        spec.regime, record.rate, record.rate_in, mass, _ratio(mass, record.rate)
    )
    return ReactiveStats(
        regime=spec.regime,
        mu=mu,
        mu_hat=normalize_reactive(mu),
        z=z,
        current=current,
        effective=effective_current(current, tol),
        rate_out_a=record.out_a,
        rate_in_b=record.in_b,
        aggregates=aggregates,
    )


def compute_statistics(
    spec: ChainSpec,
    sets: AbSets,
    *,
    method: str = "augmented",
    tolerances: Optional[Tolerances] = None,
) -> Tuple[CommittorField, ReactiveStats]:
    """Validate, then densities -> committors -> reactive statistics."""
    tol = resolve(tolerances)
    ensure_valid(spec, sets, tolerances=tol)
    densities = densities_for(spec, tolerances=tol)
    committors = solve(spec, sets, method=method, densities=densities, tolerances=tol)
    stats = statistics_from(spec, sets, committors, densities, tol)
    logger.info(
        "%s statistics: rate %.6g, reactive mass %.6g",
        spec.regime,
        stats.aggregates.rate,
        stats.aggregates.reactive_mass,
    )
    return committors, stats
