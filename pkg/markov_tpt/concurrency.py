"""Thread-pool helper for independent, seeded work items.

Ulam sampling (one item per grid cell) and trajectory ensembles (one item per
trajectory) are embarrassingly parallel. Each item derives its own RNG stream
from ``(seed, index)``, so :func:`map_ordered` returns bit-identical results
whatever the worker count: results are collected by index, never by
completion order. numpy releases the GIL inside its vectorized kernels, which
is where these items spend their time.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

from numpy.random import SFC64, Generator, SeedSequence

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

MAX_WORKERS = 64
GENERATOR_ID = "numpy.SFC64"


def make_generator(seed: int, *key: int) -> Generator:
    """The stream of the work item addressed by ``key`` in a run seeded with ``seed``."""
    sequence = SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return Generator(SFC64(sequence))


def get_workers() -> int:
    """Number of worker threads (``TPT_WORKERS``, default ``min(8, cpu_count)``)."""
    default = min(8, os.cpu_count() or 1)
    try:
        val = int(os.environ.get("TPT_WORKERS", default))
    except (ValueError, TypeError):
        return default
    return max(1, min(val, MAX_WORKERS))


def map_ordered(
    func: Callable[[T], R], items: Sequence[T], workers: Optional[int] = None
) -> List[R]:
    """Apply ``func`` to every item, returning results in input order."""
    workers = get_workers() if workers is None else max(1, min(int(workers), MAX_WORKERS))
    if workers == 1 or len(items) <= 1:
        return [func(item) for item in items]

    results: List[Optional[R]] = [None] * len(items)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(func, item) for item in items]
        for idx, future in enumerate(futures):
            results[idx] = future.result()
    logger.debug("map_ordered: %d items on %d workers", len(items), workers)
    return results  # type: ignore[return-value]
