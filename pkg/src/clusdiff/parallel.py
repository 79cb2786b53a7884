"""Thread-count control.

BLAS is pinned to one thread so reductions inside matrix products always
happen in the same order; ``CLUSDIFF_THREADS`` only caps task-level
parallelism, whose outputs are collected in submission order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

from threadpoolctl import threadpool_limits

T = TypeVar("T")
R = TypeVar("R")

_blas_limit = threadpool_limits(limits=1, user_api="blas")


def num_threads() -> int:
    raw = os.environ.get("CLUSDIFF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(1, n)


def ordered_map(fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """``[fn(x) for x in items]``, possibly on worker threads, in input order."""
    items = list(items)
    n = min(num_threads(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
