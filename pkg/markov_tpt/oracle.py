"""Independent checks for the solvers: path enumeration and trajectory estimators.

Two engines that share no code with the linear solvers:

- **Enumeration.** A committor is the total probability of all paths that
  stay in ``C`` and then hit the target set. :func:`enumerate_committor` sums
  that mass over paths of length ``<= max_len`` by a prefix-mass recursion and
  bounds what was left out by the probability of still being in ``C`` after
  ``max_len`` steps. Finite windows are enumerated exactly.
  :func:`enumerate_paths` walks the individual paths depth-first.
- **Simulation.** Seeded trajectories (one ``SFC64`` stream per trajectory,
  derived from ``(seed, index)``), hitting times, ergodic time averages over
  one long stationary trajectory and ensemble averages over finite windows.

Ergodic estimates assume the trajectory starts from the stationary
distribution; :func:`simulate` does that, so no burn-in is discarded.
"""

from __future__ import annotations

import logging
import math
from bisect import bisect_right
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from markov_tpt.chains import (
    AbSets,
    ChainSpec,
    FiniteTimeChain,
    TransitionMatrix,
    densities_for,
    reverse_transitions,
)
from markov_tpt.concurrency import make_generator, map_ordered
from markov_tpt.config import Tolerances, resolve
from markov_tpt.errors import PreconditionError, ValidationError

logger = logging.getLogger(__name__)

DIRECTIONS = ("forward", "backward")
MAX_PATH_PREFIXES = 200_000


# =============================================================================
# Enumeration
# =============================================================================


@dataclass(frozen=True)
class EnumerationResult:
    """``lower <= q <= lower + truncation``; ``exact`` when nothing was cut off."""

    lower: float
    truncation: float
    exact: bool

    @property
    def upper(self) -> float:
        return self.lower + self.truncation

    def contains(self, value: float, slack: float = 1e-10) -> bool:
        return self.lower - slack <= value <= self.upper + slack


def _path_steps(
    spec: ChainSpec, sets: AbSets, slice_: int, direction: str, tol: Tolerances
) -> Tuple[Callable[[int], TransitionMatrix], Optional[int], np.ndarray]:
    """Matrix for step ``k`` of a path started at ``slice_``, the step limit and the target.

    Forward paths use ``P`` at the slices they pass; backward paths use the
    time-reversed matrices, walking to earlier slices.
    """
    if direction not in DIRECTIONS:
        raise ValidationError(f"direction must be 'forward' or 'backward', got {direction!r}.")
    a, b, _ = sets.split(spec.n_states)
    finite = isinstance(spec, FiniteTimeChain)
    if finite and not 0 <= slice_ < spec.horizon:
        raise ValidationError(f"Slice {slice_} outside the window 0..{spec.horizon - 1}.")

    if direction == "forward":
        matrices = spec.matrices
        if finite:
            return (lambda k: matrices[slice_ + k]), spec.horizon - 1 - slice_, b
        period = len(matrices)
        return (lambda k: matrices[(slice_ + k) % period]), None, b

    backward = reverse_transitions(spec, densities_for(spec, tolerances=tol), tolerances=tol)
    if finite:
        # backward[j] is the reversed matrix of slice j + 1
        return (lambda k: backward[slice_ - k - 1]), slice_, a
    period = len(backward)
    return (lambda k: backward[(slice_ - k) % period]), None, a


def _check_start(sets: AbSets, state: int, n_states: int) -> None:
    if not 0 <= state < n_states:
        raise ValidationError(f"State {state} outside 0..{n_states - 1}.")
    if state in sets.set_a or state in sets.set_b:
        raise PreconditionError(
            f"State {state} lies in A or B; enumeration is only defined on the transition region."
        )


def enumerate_committor(
    spec: ChainSpec,
    sets: AbSets,
    state: int,
    slice_: int = 0,
    max_len: int = 50,
    *,
    direction: str = "forward",
    tolerances: Optional[Tolerances] = None,
) -> EnumerationResult:
    """Probability mass of all paths from ``state`` that stay in ``C`` and then hit the target.

    ``mass`` holds, per transition state, the probability of the path
    prefixes of the current length that are still in ``C``.
    """
    tol = resolve(tolerances)
    n = spec.n_states
    _check_start(sets, state, n)
    if max_len < 1:
        raise ValidationError(f"max_len must be >= 1, got {max_len}.")
    step, limit, target = _path_steps(spec, sets, slice_, direction, tol)
    _, _, c = sets.split(n)
    position = int(np.searchsorted(c, state))

    steps = limit if limit is not None else max_len
    mass = np.zeros(len(c))
    mass[position] = 1.0
    lower = 0.0
    for k in range(steps):
        matrix = step(k)
        lower += float(mass @ matrix.into(c, target))
        mass = np.asarray(matrix.block(c, c).T @ mass).ravel()
        if not mass.any():
            break

    if limit is not None:
        return EnumerationResult(lower, 0.0, True)
    remaining = float(mass.sum())
    return EnumerationResult(lower, remaining, remaining == 0.0)


def enumerate_paths(
    spec: ChainSpec,
    sets: AbSets,
    state: int,
    slice_: int = 0,
    max_len: int = 8,
    *,
    direction: str = "forward",
    max_paths: int = MAX_PATH_PREFIXES,
    tolerances: Optional[Tolerances] = None,
) -> EnumerationResult:
    """Depth-first walk over every individual path; for chains of a handful of states."""
    tol = resolve(tolerances)
    n = spec.n_states
    _check_start(sets, state, n)
    if n > tol.oracle_max_states:
        raise PreconditionError(
            f"Path enumeration is limited to {tol.oracle_max_states} states, chain has {n}."
        )
    step, limit, target = _path_steps(spec, sets, slice_, direction, tol)
    depth = limit if limit is not None else max_len
    targets = set(int(t) for t in target)
    boundary = sets.set_a | sets.set_b
    dense: Dict[int, np.ndarray] = {}

    def matrix_at(k: int) -> np.ndarray:
        if k not in dense:
            dense[k] = step(k).dense()
        return dense[k]

    lower = 0.0
    truncated = 0.0
    visited = 0
    stack: List[Tuple[int, int, float]] = [(state, 0, 1.0)]
    while stack:
        current, length, prob = stack.pop()
        if length == depth:
            truncated += prob
            continue
        row = matrix_at(length)[current]
        for nxt in np.flatnonzero(row > 0):
            visited += 1
            if visited > max_paths:
                raise PreconditionError(
                    f"More than {max_paths} path prefixes; lower max_len or use "
                    "enumerate_committor."
                )
            p = prob * float(row[nxt])
            if nxt in targets:
                lower += p
            elif nxt not in boundary:
                stack.append((int(nxt), length + 1, p))

    if limit is not None:
        return EnumerationResult(lower, 0.0, True)
    return EnumerationResult(lower, truncated, truncated == 0.0)


def path_prefix_bound(n_states: int, n_inner: int, depth: int) -> int:
    """Upper bound on the prefixes `enumerate_paths` visits; only C states are expanded."""
    return n_states * sum(n_inner**length for length in range(depth))


# =============================================================================
# Trajectories
# =============================================================================


@dataclass(frozen=True, eq=False)
class TrajectorySample:
    """One sampled path. Position ``k`` of ``states`` is time ``slice_offset + k``."""

    states: np.ndarray
    slice_offset: int = 0
    rng_seed: int = 0
    index: int = 0

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64)
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    def __len__(self) -> int:
        return len(self.states)


def impossible_steps(traj: TrajectorySample, spec: ChainSpec) -> List[int]:
    """Positions ``k`` where ``states[k] -> states[k+1]`` has zero probability."""
    bad = []
    period = len(spec.matrices)
    finite = isinstance(spec, FiniteTimeChain)
    for k in range(len(traj) - 1):
        t = traj.slice_offset + k
        matrix = spec.matrices[t if finite else t % period]
        i, j = int(traj.states[k]), int(traj.states[k + 1])
        if matrix.entries[i, j] <= 0:
            bad.append(k)
    return bad


@dataclass(frozen=True)
class HittingTimes:
    """Entrance and exit times around time ``n``; ``inf`` / ``-inf`` when never hit."""

    next_a: float
    next_b: float
    last_a: float
    last_b: float


def _last_visit(mask: np.ndarray) -> np.ndarray:
    """Index of the last ``True`` at or before each position, ``-1`` if none."""
    idx = np.where(mask, np.arange(len(mask)), -1)
    return np.maximum.accumulate(idx) if len(idx) else idx


def _next_visit(mask: np.ndarray) -> np.ndarray:
    """Index of the first ``True`` at or after each position, ``len(mask)`` if none."""
    size = len(mask)
    idx = np.where(mask, np.arange(size), size)
    return np.minimum.accumulate(idx[::-1])[::-1] if size else idx


def _membership(states: np.ndarray, members) -> np.ndarray:
    return np.isin(states, np.fromiter(members, dtype=np.int64, count=len(members)))


def hitting_times(traj: TrajectorySample, sets: AbSets, n: int) -> HittingTimes:
    """First entrance into ``A``/``B`` at or after ``n`` and last exit at or before ``n``."""
    position = n - traj.slice_offset
    if not 0 <= position < len(traj):
        raise ValidationError(
            f"Time {n} outside the trajectory range "
            f"{traj.slice_offset}..{traj.slice_offset + len(traj) - 1}."
        )
    size = len(traj)
    in_a = _membership(traj.states, sets.set_a)
    in_b = _membership(traj.states, sets.set_b)

    def forward(mask: np.ndarray) -> float:
        k = int(_next_visit(mask)[position])
        return math.inf if k == size else float(traj.slice_offset + k)

    def backward(mask: np.ndarray) -> float:
        k = int(_last_visit(mask)[position])
        return -math.inf if k < 0 else float(traj.slice_offset + k)

    return HittingTimes(forward(in_a), forward(in_b), backward(in_a), backward(in_b))


def _sampler(matrix: TransitionMatrix) -> List[Tuple[List[int], List[float]]]:
    """Per row: positive columns and their normalized cumulative probabilities."""
    csr = matrix.csr()
    rows = []
    for i in range(matrix.n_states):
        start, stop = csr.indptr[i], csr.indptr[i + 1]
        cols = csr.indices[start:stop]
        probs = csr.data[start:stop]
        keep = probs > 0
        cols, probs = cols[keep], probs[keep]
        cum = np.cumsum(probs)
        if len(cum):
            cum /= cum[-1]
            cum[-1] = 1.0
        rows.append((cols.tolist(), cum.tolist()))
    return rows


def _draw(cols: List[int], cum: List[float], u: float) -> int:
    return cols[bisect_right(cum, u)]


def simulate(
    spec: ChainSpec,
    *,
    length: Optional[int] = None,
    n_trajectories: int = 1,
    seed: int = 0,
    start_slice: int = 0,
    workers: Optional[int] = None,
    tolerances: Optional[Tolerances] = None,
) -> List[TrajectorySample]:
    """Sample trajectories in the chain's own law.

    Stationary and periodic chains start from ``pi`` (resp. ``pi_m`` at
    ``start_slice``) and run for ``length`` time points. Finite chains start
    from ``lambda(0)`` and cover the whole window ``0 .. N-1``.
    """
    if n_trajectories < 1:
        raise ValidationError(f"n_trajectories must be >= 1, got {n_trajectories}.")
    densities = densities_for(spec, tolerances=tolerances)
    matrices = spec.matrices
    if isinstance(spec, FiniteTimeChain):
        length = spec.horizon
        start_slice = 0
        initial = np.asarray(densities[0])
    else:
        if length is None or length < 1:
            raise ValidationError(f"length must be >= 1, got {length}.")
        initial = np.asarray(densities[start_slice % len(densities)])
    period = len(matrices)
    finite = isinstance(spec, FiniteTimeChain)

    samplers = [_sampler(m) for m in matrices]
    init_cum = np.cumsum(initial)
    init_cum /= init_cum[-1]
    init_cum[-1] = 1.0
    init_cols = list(range(len(initial)))
    init_list = init_cum.tolist()

    def run(index: int) -> TrajectorySample:
        rng = make_generator(seed, index)
        draws = rng.random(length)
        states = np.empty(length, dtype=np.int64)
        state = _draw(init_cols, init_list, float(draws[0]))
        states[0] = state
        for k in range(1, length):
            t = start_slice + k - 1
            cols, cum = samplers[t if finite else t % period][state]
            state = _draw(cols, cum, float(draws[k]))
            states[k] = state
        return TrajectorySample(states, start_slice, seed, index)

    trajectories = map_ordered(run, list(range(n_trajectories)), workers)
    logger.info(
        "Simulated %d trajectories of length %d (seed %d)", n_trajectories, length, seed
    )
    return trajectories


# =============================================================================
# Estimators
# =============================================================================


@dataclass(frozen=True, eq=False)
class ErgodicEstimates:
    """Time averages of the reactive indicators with their standard errors."""

    mu: np.ndarray
    mu_se: np.ndarray
    current: np.ndarray
    current_se: np.ndarray
    rate: float
    rate_se: float
    n_steps: int
    se_method: str


def _batch_se(indicator_counts: np.ndarray, batch_sizes: np.ndarray) -> np.ndarray:
    """Batch-means standard error from per-batch counts (``batches x entries``)."""
    means = indicator_counts / batch_sizes[:, None]
    return means.std(axis=0, ddof=1) / math.sqrt(len(batch_sizes))


def _binomial_se(p: np.ndarray, samples: int) -> np.ndarray:
    return np.sqrt(np.clip(p * (1.0 - p), 0.0, None) / samples)


def _reactive_flags(states: np.ndarray, sets: AbSets) -> Tuple[np.ndarray, np.ndarray]:
    """Per position: last boundary visit was in ``A``; next boundary visit is in ``B``."""
    size = len(states)
    in_a = _membership(states, sets.set_a)
    in_b = _membership(states, sets.set_b)
    boundary = in_a | in_b
    last = _last_visit(boundary)
    nxt = _next_visit(boundary)
    came_from_a = np.zeros(size, dtype=bool)
    seen = last >= 0
    came_from_a[seen] = in_a[last[seen]]
    goes_to_b = np.zeros(size, dtype=bool)
    ahead = nxt < size
    goes_to_b[ahead] = in_b[nxt[ahead]]
    return came_from_a, goes_to_b


def ergodic_estimates(
    traj: TrajectorySample,
    sets: AbSets,
    n_states: int,
    *,
    se_method: str = "batch",
    n_batches: int = 50,
) -> ErgodicEstimates:
    """Trajectory averages of ``mu``, ``f`` and ``k`` over one stationary trajectory.

    ``mu`` averages over all ``L`` positions, ``f`` and ``k`` over the ``L - 1``
    transitions.
    """
    if se_method not in ("batch", "binomial"):
        raise ValidationError(f"se_method must be 'batch' or 'binomial', got {se_method!r}.")
    states = traj.states
    size = len(states)
    if size < 2 or (se_method == "batch" and size - 1 < 2 * n_batches):
        raise ValidationError(
            f"Trajectory of length {size} is too short for {se_method} standard errors."
        )
    came_from_a, goes_to_b = _reactive_flags(states, sets)
    on_path = came_from_a & goes_to_b
    step_reactive = came_from_a[:-1] & goes_to_b[1:]
    pairs = states[:-1] * n_states + states[1:]
    a = np.array(sorted(sets.set_a), dtype=int)

    mu = np.bincount(states[on_path], minlength=n_states) / size
    current = (
        np.bincount(pairs[step_reactive], minlength=n_states * n_states).reshape(
            n_states, n_states
        )
        / (size - 1)
    )
    rate = float(current[a].sum()) if len(a) else 0.0

    if se_method == "binomial":
        mu_se = _binomial_se(mu, size)
        current_se = _binomial_se(current, size - 1)
        rate_se = float(_binomial_se(np.array(rate), size - 1))
    else:
        mu_se = _batched(states, on_path, n_states, n_batches)
        leaving = np.isin(states[:-1], a) & step_reactive
        current_se = _batched(pairs, step_reactive, n_states * n_states, n_batches).reshape(
            n_states, n_states
        )
        rate_se = float(_batched(np.zeros(size - 1, dtype=np.int64), leaving, 1, n_batches)[0])

    logger.debug("Ergodic estimates over %d steps: rate %.6g +- %.2g", size, rate, rate_se)
    return ErgodicEstimates(mu, mu_se, current, current_se, rate, rate_se, size, se_method)


def _batched(labels: np.ndarray, flags: np.ndarray, n_labels: int, n_batches: int) -> np.ndarray:
    edges = np.linspace(0, len(labels), n_batches + 1).astype(int)
    counts = np.empty((n_batches, n_labels))
    for k in range(n_batches):
        lo, hi = edges[k], edges[k + 1]
        counts[k] = np.bincount(labels[lo:hi][flags[lo:hi]], minlength=n_labels)
    return _batch_se(counts, np.diff(edges).astype(float))


@dataclass(frozen=True)
class EnsembleEstimate:
    rate: float
    se: Optional[float]
    n_samples: int


def window_departures(traj: TrajectorySample, sets: AbSets) -> int:
    """Departures from ``A`` at ``n <= N-2`` whose next boundary visit is in ``B``."""
    states = traj.states
    if len(states) < 2:
        return 0
    _, goes_to_b = _reactive_flags(states, sets)
    in_a = _membership(states, sets.set_a)
    return int(np.count_nonzero(in_a[:-1] & goes_to_b[1:]))


def ensemble_rate_estimate(
    spec: FiniteTimeChain,
    sets: AbSets,
    n_samples: int,
    seed: int = 0,
    *,
    workers: Optional[int] = None,
    tolerances: Optional[Tolerances] = None,
) -> EnsembleEstimate:
    """Monte Carlo estimate of the window-averaged rate over ``n_samples`` independent windows."""
    if not isinstance(spec, FiniteTimeChain):
        raise PreconditionError("ensemble_rate_estimate needs a finite-time chain.")
    if n_samples < 1:
        raise ValidationError(f"n_samples must be >= 1, got {n_samples}.")
    trajectories = simulate(
        spec, n_trajectories=n_samples, seed=seed, workers=workers, tolerances=tolerances
    )
    horizon = spec.horizon
    samples = np.array([window_departures(t, sets) / horizon for t in trajectories])
    rate = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else None
    return EnsembleEstimate(rate, se, n_samples)


def z_score(estimate: float, exact: float, se: Optional[float]) -> float:
    """``|estimate - exact| / se``; zero error counts as 0 even when ``se`` is 0."""
    diff = abs(estimate - exact)
    if diff == 0.0:
        return 0.0
    if not se:
        return math.inf
    return diff / se
