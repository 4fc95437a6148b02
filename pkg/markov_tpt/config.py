"""
Numerical tolerances and run-time knobs.

All tolerances live in one frozen dataclass so tests, solvers and the CLI read
the same numbers. Defaults can be overridden from the environment
(``TPT_TOL_<FIELD>``), from an experiment config ``"tolerances"`` block, or
from ``--tolerance NAME=VALUE`` on the command line.
"""

import dataclasses
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional

from markov_tpt.errors import ValidationError

logger = logging.getLogger(__name__)

ENV_PREFIX = "TPT_TOL_"


@dataclass(frozen=True)
class Tolerances:
    """Every tolerance and iteration cap used by the library."""

    row_sum: float = 1e-12
    initial_density_sum: float = 1e-12
    family_sum: float = 1e-10
    equivariance: float = 1e-10
    stationary_residual: float = 1e-13
    stationary_accept: float = 1e-12
    stationary_max_iter: int = 1_000_000
    dense_fallback_max_states: int = 2000
    committor_residual: float = 1e-10
    committor_clip: float = 1e-10
    current_clip: float = 1e-12
    conservation: float = 1e-10
    sparse_density: float = 0.25
    oracle_max_states: int = 6
    oracle_max_horizon: int = 12

    def with_overrides(self, overrides: Optional[Mapping[str, Any]]) -> "Tolerances":
        """Return a copy with ``overrides`` applied; unknown names are rejected."""
        if not overrides:
            return self
        known = {f.name: f.type for f in dataclasses.fields(self)}
        clean: Dict[str, Any] = {}
        for name, value in overrides.items():
            key = str(name).strip().lower().replace("-", "_")
            if key not in known:
                raise ValidationError(
                    f"Unknown tolerance {name!r}. Valid names: {', '.join(sorted(known))}."
                )
            clean[key] = _coerce(key, getattr(self, key), value)
        return dataclasses.replace(self, **clean)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(name: str, current: Any, value: Any) -> Any:
    try:
        if isinstance(current, int) and not isinstance(current, bool):
            return int(float(value))
        return float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"Tolerance {name!r} needs a number, got {value!r}.")


def get_tolerances(overrides: Optional[Mapping[str, Any]] = None) -> Tolerances:
    """Defaults, then ``TPT_TOL_*`` environment variables, then ``overrides``."""
    env: Dict[str, Any] = {}
    for f in dataclasses.fields(Tolerances):
        raw = os.environ.get(ENV_PREFIX + f.name.upper())
        if raw is not None and raw.strip():
            env[f.name] = raw
    tolerances = Tolerances().with_overrides(env)
    if env:
        logger.debug("Tolerance overrides from environment: %s", sorted(env))
    return tolerances.with_overrides(overrides)


def resolve(tolerances: Optional[Tolerances]) -> Tolerances:
    """The tolerances to use when a caller passed ``None``."""
    return tolerances if tolerances is not None else get_tolerances()


def get_log_level(default: str = "WARNING") -> str:
    return os.environ.get("TPT_LOG_LEVEL", default).upper()
