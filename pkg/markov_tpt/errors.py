"""Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code the CLI reports for it, plus a
``details`` dict that ends up verbatim in the machine-readable error JSON.
"""

from __future__ import annotations

from typing import Any, Dict, List, Optional


class TPTError(Exception):
    """Base class for all markov-tpt failures."""

    exit_code = 1
    error_type = "tpt_error"
    suggestion = "Check the input chain and configuration."

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = dict(details or {})


class ValidationError(TPTError, ValueError):
    """Raised when a chain, set pair or config violates its invariants."""

    exit_code = 2
    error_type = "validation_error"
    suggestion = "Fix the reported diagnostics in the chain specification or config."

    def __init__(self, message: str, diagnostics: Optional[List[Any]] = None, **details: Any):
        diagnostics = list(diagnostics or [])
        if diagnostics:
            details["diagnostics"] = [d.to_dict() for d in diagnostics]
        super().__init__(message, details)
        self.diagnostics = diagnostics


class PreconditionError(TPTError, ValueError):
    """Raised when an operation's precondition does not hold (e.g. reducibility)."""

    exit_code = 2
    error_type = "precondition_error"
    suggestion = "The operation is not defined for this input; see the message for the gate."


class SolverFailure(TPTError, RuntimeError):
    """Raised when a numerical routine fails or produces out-of-range values."""

    exit_code = 3
    error_type = "solver_failure"
    suggestion = "Loosen the tolerance with --tolerance or check the chain for near-reducibility."


class OracleFailure(TPTError):
    """Raised when an independent oracle disagrees with the solvers."""

    exit_code = 4
    error_type = "oracle_failure"
    suggestion = "Inspect the validation report for the failing check."
