"""Deterministic worker-pool helper.

Results are merged in submission order, so output is identical at any
worker count; only independent per-item computations may go through here.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def parallel_map_ordered(
    fn: Callable[[T], R], items: Sequence[T], workers: int = 1
) -> list[R]:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
