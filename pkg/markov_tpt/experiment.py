"""
Experiment configuration for the command-line front end.

An experiment config is a JSON file with exactly one chain source::

    {
      "chain": "chains/gambler.json",          # a chain specification file
      # or
      "ulam": {
        "grid": {"box": [-2, 2, -1, 2], "cell_size": [0.2, 0.2]},
        "langevin": {"potential": "triple_well", "sigma": 1.0, "tau": 0.3,
                     "euler_dt": 0.01, "samples_per_cell": 10000,
                     "forcing": {"type": "circulation_cosine",
                                 "amplitude": 1.4, "period": 1.8}},
        "regime": "stationary" | "periodic" | "finite",
        "horizon": 6
      },
      "sets": {"A": [0] | {"center": [-1, 0], "radius": 0.35}, "B": ...},
      "set_radius": 0.35,
      "method": "augmented",
      "windows": [1, 3, 5, 9],
      "seed": 42,
      "out": "runs/example",
      "tolerances": {"committor_residual": 1e-9},
      "simulate": {"length": 1000, "n_trajectories": 1},
      "validate": {"max_len": 200, "ergodic_steps": 1000000, "ensemble_samples": 100000}
    }

A chain specification file (top-level ``"regime"``) is accepted as a config
on its own.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from markov_tpt.chains import (
    AbSets,
    FiniteTimeChain,
    PeriodicChain,
    StationaryChain,
    is_irreducible,
    recurrent_distribution,
)
from markov_tpt.config import Tolerances
from markov_tpt.errors import ValidationError
from markov_tpt.formats import ChainDocument, chain_from_dict, read_chain
from markov_tpt.ulam import (
    LangevinSpec,
    UlamGrid,
    build_periodic_family,
    cells_in_disk,
    estimate_transition_matrix,
)

logger = logging.getLogger(__name__)

DEFAULT_SET_RADIUS = 0.35
DEFAULT_CENTERS = {"A": (-1.0, 0.0), "B": (1.0, 0.0)}

_KNOWN_KEYS = {
    "chain",
    "ulam",
    "sets",
    "set_radius",
    "method",
    "windows",
    "seed",
    "out",
    "tolerances",
    "simulate",
    "validate",
}


@dataclass
class ExperimentConfig:
    """A parsed experiment config. ``raw`` is kept verbatim for the config hash."""

    raw: Dict[str, Any]
    base_dir: Path
    chain_path: Optional[Path] = None
    chain_inline: Optional[Dict[str, Any]] = None
    ulam: Optional[Dict[str, Any]] = None
    sets: Optional[Dict[str, Any]] = None
    set_radius: float = DEFAULT_SET_RADIUS
    method: str = "augmented"
    windows: List[int] = field(default_factory=list)
    seed: int = 0
    out: Optional[Path] = None
    tolerances: Dict[str, Any] = field(default_factory=dict)
    simulate: Dict[str, Any] = field(default_factory=dict)
    validate: Dict[str, Any] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: Mapping[str, Any]) -> str:
    """sha256 of the canonical JSON form (sorted keys, no whitespace)."""
    canonical = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def config_from_dict(data: Mapping[str, Any], base_dir: Path) -> ExperimentConfig:
    data = dict(data)
    if "regime" in data:
        return ExperimentConfig(raw=data, base_dir=base_dir, chain_inline=data)

    unknown = sorted(set(data) - _KNOWN_KEYS)
    if unknown:
        raise ValidationError(f"Unknown config keys: {unknown}.")
    sources = [k for k in ("chain", "ulam") if data.get(k) is not None]
    if len(sources) != 1:
        raise ValidationError(
            f"A config needs exactly one chain source ('chain' or 'ulam'), got {sources or 'none'}."
        )

    config = ExperimentConfig(raw=data, base_dir=base_dir)
    chain = data.get("chain")
    if isinstance(chain, str):
        path = Path(chain)
        config.chain_path = path if path.is_absolute() else base_dir / path
        if not config.chain_path.exists():
            raise ValidationError(f"Chain file not found: {config.chain_path}")
    elif isinstance(chain, Mapping):
        config.chain_inline = dict(chain)
    elif chain is not None:
        raise ValidationError("'chain' must be a file path or an inline chain specification.")
    config.ulam = data.get("ulam")

    config.sets = data.get("sets")
    config.set_radius = float(data.get("set_radius", DEFAULT_SET_RADIUS))
    config.method = str(data.get("method", "augmented"))
    config.windows = [int(n) for n in data.get("windows", [])]
    if config.windows and any(b <= a for a, b in zip(config.windows, config.windows[1:])):
        raise ValidationError(f"'windows' must be increasing, got {config.windows}.")
    config.seed = int(data.get("seed", 0))
    if data.get("out"):
        out = Path(data["out"])
        config.out = out if out.is_absolute() else base_dir / out
    config.tolerances = dict(data.get("tolerances", {}))
    config.simulate = dict(data.get("simulate", {}))
    config.validate = dict(data.get("validate", {}))
    return config


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"Config {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ValidationError(f"Config {path} must be a JSON object.")
    return config_from_dict(data, path.parent)


def resolve_sets(
    raw: Mapping[str, Any], grid: Optional[UlamGrid], radius: float = DEFAULT_SET_RADIUS
) -> AbSets:
    """``{"A": ..., "B": ...}`` with index lists or disk descriptors."""
    resolved = {}
    for name in ("A", "B"):
        entry = raw.get(name)
        if entry is None:
            raise ValidationError(f"Set {name} is missing from 'sets'.")
        if isinstance(entry, Mapping):
            if grid is None:
                raise ValidationError(f"Set {name} is a disk but the chain has no grid geometry.")
            if "center" not in entry:
                raise ValidationError(f"Disk descriptor for {name} needs a 'center'.")
            disk_radius = float(entry.get("radius", radius))
            resolved[name] = cells_in_disk(grid, entry["center"], disk_radius)
        else:
            resolved[name] = [int(i) for i in entry]
    return AbSets(resolved["A"], resolved["B"])


def default_disks(grid: UlamGrid, radius: float) -> AbSets:
    return AbSets(
        cells_in_disk(grid, DEFAULT_CENTERS["A"], radius),
        cells_in_disk(grid, DEFAULT_CENTERS["B"], radius),
    )


def build_ulam_chain(
    descriptor: Mapping[str, Any],
    seed: int,
    *,
    tolerances: Optional[Tolerances] = None,
    workers: Optional[int] = None,
) -> ChainDocument:
    """Estimate the chain described by an ``"ulam"`` block."""
    if "grid" in descriptor:
        grid = UlamGrid.from_dict(descriptor["grid"])
    else:
        grid = UlamGrid.default_grid()
    langevin = LangevinSpec.from_dict(descriptor.get("langevin", {}))
    regime = descriptor.get("regime", "stationary")

    if regime == "periodic":
        if langevin.forcing is None:
            raise ValidationError("A periodic Ulam chain needs a 'forcing' block.")
        slices = int(descriptor.get("period_slices", round(langevin.forcing.period / langevin.tau)))
        spec = PeriodicChain(
            build_periodic_family(
                grid, langevin, slices, seed, workers=workers, tolerances=tolerances
            )
        )
    elif regime in ("stationary", "finite"):
        matrix = estimate_transition_matrix(
            grid, langevin, 0.0, seed, workers=workers, tolerances=tolerances
        )
        if regime == "stationary":
            spec = StationaryChain(matrix)
        else:
            horizon = int(descriptor.get("horizon", 0))
            if horizon < 2:
                raise ValidationError("A finite Ulam chain needs 'horizon' >= 2.")
            if not is_irreducible(matrix):
                logger.warning(
                    "Ulam matrix is reducible; the window starts from its closed classes only"
                )
            pi = recurrent_distribution(matrix, tolerances=tolerances)
            spec = FiniteTimeChain((matrix,) * (horizon - 1), pi)
    else:
        raise ValidationError(f"Unknown Ulam regime {regime!r}.")
    return ChainDocument(spec, None, grid, {"langevin": langevin.to_dict()})


def build_chain(
    config: ExperimentConfig,
    *,
    tolerances: Optional[Tolerances] = None,
    workers: Optional[int] = None,
) -> ChainDocument:
    """The chain and sets named by ``config``."""
    if config.chain_path is not None:
        document = read_chain(config.chain_path, tolerances)
    elif config.chain_inline is not None:
        document = chain_from_dict(config.chain_inline, config.base_dir, tolerances)
    else:
        document = build_ulam_chain(
            config.ulam, config.seed, tolerances=tolerances, workers=workers
        )

    if config.sets is not None:
        document.sets = resolve_sets(config.sets, document.grid, config.set_radius)
    elif document.sets is None and document.grid is not None:
        document.sets = default_disks(document.grid, config.set_radius)
    if document.sets is None:
        raise ValidationError(
            "No sets A and B: add 'sets' to the config or set_A/set_B to the chain."
        )
    return document
