"""Deterministic parallel mapping for replication-level tasks.

Tasks must be pure functions of their argument (each replication draws
from its own keyed random stream), so results are identical at any
parallelism degree; outputs are reduced in input order either way.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

A = TypeVar("A")
B = TypeVar("B")


def ordered_map(fn: Callable[[A], B], items: Sequence[A], parallelism: int = 1) -> list[B]:
    """Map fn over items, in order, optionally across processes."""
    if parallelism <= 1:
        return [fn(item) for item in items]
    chunk = max(1, len(items) // (4 * parallelism))
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items, chunksize=chunk))
