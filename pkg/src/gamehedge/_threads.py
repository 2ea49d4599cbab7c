"""Worker-thread configuration shared by the batch routines."""

from __future__ import annotations

import os
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

T = TypeVar("T")
R = TypeVar("R")


def worker_threads() -> int:
    """Thread cap from ``GAMEHEDGE_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("GAMEHEDGE_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Order-preserving map, threaded when more than one worker is allowed."""
    items = list(items)
    threads = min(worker_threads(), len(items))
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
