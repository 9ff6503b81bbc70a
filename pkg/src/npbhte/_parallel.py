"""Thread helpers.

Replicate-level work (bootstrap draws, forest trees) is embarrassingly
parallel and every replicate owns a counter-addressed random stream, so
results are identical for any worker count. ``NPB_HTE_THREADS`` caps the
pool globally; callers may request fewer.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

THREADS_ENV = "NPB_HTE_THREADS"

T = TypeVar("T")


def effective_threads(requested: int | None = None) -> int:
    """Resolve a worker count from the request and the environment cap."""
    cap = os.environ.get(THREADS_ENV)
    limit = None
    if cap is not None:
        try:
            limit = max(1, int(cap))
        except ValueError:
            limit = None
    n = requested if requested is not None else (limit or 1)
    if limit is not None:
        n = min(n, limit)
    return max(1, n)


def run_indexed(fn: Callable[[int], T], count: int, threads: int | None = None) -> list[T]:
    """Evaluate ``fn(0..count-1)`` and return results in index order."""
    workers = effective_threads(threads)
    if workers == 1 or count <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def map_indexed(fn: Callable[[int, T], object], items: Sequence[T], threads: int | None = None) -> list:
    """Like ``run_indexed`` but passes each item along with its index."""
    return run_indexed(lambda i: fn(i, items[i]), len(items), threads)
