"""Deterministic chunked parallelism helpers.

Work is split into fixed-size chunks that do not depend on the worker
count, and results are merged in chunk order, so outputs are identical
for any ``threads`` value.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

CHUNK = 256


def resolve_threads(threads: int | None = None) -> int:
    """Pick the worker count: explicit value, A2R_THREADS, then cpu count."""
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("A2R_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def chunk_ranges(n: int, size: int = CHUNK) -> list[tuple[int, int]]:
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def ordered_map(fn: Callable[[T], R], items: Sequence[T], threads: int) -> list[R]:
    """Map ``fn`` over ``items``, preserving order; threaded when threads > 1."""
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
