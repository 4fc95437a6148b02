"""
markov-tpt

Transition path theory for discrete Markov chains in the stationary,
periodically varying and finite-time regimes.
"""

__version__ = "0.1.0"

from markov_tpt.chains import (  # noqa: E402
    AbSets,
    FiniteTimeChain,
    PeriodicChain,
    StationaryChain,
    TransitionMatrix,
    validate_chain,
)
from markov_tpt.committors import SwitchingSpec, solve, solve_switching  # noqa: E402
from markov_tpt.config import Tolerances, get_tolerances  # noqa: E402
from markov_tpt.errors import (  # noqa: E402
    OracleFailure,
    PreconditionError,
    SolverFailure,
    TPTError,
    ValidationError,
)
from markov_tpt.reactive import compute_statistics  # noqa: E402

__all__ = [
    "__version__",
    # Chains
    "TransitionMatrix",
    "AbSets",
    "StationaryChain",
    "PeriodicChain",
    "FiniteTimeChain",
    "validate_chain",
    # Solvers
    "solve",
    "solve_switching",
    "SwitchingSpec",
    "compute_statistics",
    # Configuration and errors
    "Tolerances",
    "get_tolerances",
    "TPTError",
    "ValidationError",
    "PreconditionError",
    "SolverFailure",
    "OracleFailure",
]
