"""Batch sharding over a thread pool."""

import concurrent.futures
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def map_shards(fn: Callable[[T], R], shards: Iterable[T], threads: int = 1) -> list[R]:
    """Apply fn to every shard, results in shard order.

    With one thread the shards run inline, so single-threaded runs never
    touch the pool.
    """
    shards = list(shards)
    if threads <= 1 or len(shards) <= 1:
        return [fn(shard) for shard in shards]

    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(fn, shards))


def batch_slices(count: int, batch_size: int) -> list[slice]:
    """Consecutive slices covering count items, the last one possibly short."""
    return [slice(start, min(start + batch_size, count)) for start in range(0, count, batch_size)]
