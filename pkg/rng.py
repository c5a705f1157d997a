"""
Deterministic random substreams and an order-preserving worker pool.

A substream is identified by a base seed plus a path of integer keys, e.g.
(seed, replicate) or (seed, replicate, stage). Each path maps to its own
counter-based Philox generator, so the numbers a work unit sees never depend
on which thread runs it or in what order.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Sequence, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

_MASK64 = 0xFFFFFFFFFFFFFFFF

# Stage keys keep substreams of different pipeline steps apart
STAGE_DATA = 0
STAGE_BOOTSTRAP = 1
STAGE_SELECTION = 2


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Generator for the (seed, *keys) path."""
    if seed < 0 or seed > _MASK64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *keys: int) -> int:
    """A 64-bit seed for a child computation that takes a seed, not a generator."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def parallel_map(func: Callable[[T], R], items: Iterable[T], workers: int = 1) -> List[R]:
    """Apply func to every item; results come back in input order."""
    items: Sequence[T] = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
