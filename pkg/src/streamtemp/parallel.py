"""Bounded worker pool with order-stable results.

Thread workers suit this package: the heavy inner loops sit in BLAS and
compiled kernels that release the GIL, and threads let every task share
the process-wide kernel cache.  Results always come back in submission
order so parallel runs reproduce serial ones.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

__all__ = ["ordered_map", "make_mapper"]


def ordered_map(fn, items, threads: int = 1) -> list:
    """Apply ``fn`` over ``items`` with at most ``threads`` workers.

    Exceptions propagate exactly as in a serial loop: the first failing
    item (in submission order) raises.
    """
    items = list(items)
    if threads < 1:
        raise ValueError("threads must be >= 1")
    if threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def make_mapper(threads: int):
    """A map-like callable usable as ``parallel_map`` in training entry points."""
    return lambda fn, items: ordered_map(fn, items, threads)
