"""Per-site executor abstraction with protocol-based swappable implementations.

Work that is independent across sites between two consensus barriers (local
sparse coding) is submitted through a ``SitePool``. ``SerialSitePool`` is the
default; ``ThreadedSitePool`` fans the same calls out to worker threads. Both
return results in submission order, so outputs never depend on scheduling.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import Protocol, TypeVar

T = TypeVar("T")
R = TypeVar("R")


class SitePool(Protocol):
    """Protocol for mapping a per-site function over site inputs."""

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        """Apply *fn* to every item and return results in item order."""
        ...


class SerialSitePool:
    """Runs every site in the calling thread."""

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        return [fn(item) for item in items]


class ThreadedSitePool:
    """Runs sites on a thread pool; numpy releases the GIL in its kernels."""

    def __init__(self, max_workers: int) -> None:
        self.max_workers = max_workers

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            return list(executor.map(fn, items))


def make_site_pool(workers: int) -> SitePool:
    """Return the serial pool for ``workers <= 1`` and a threaded one otherwise."""
    if workers <= 1:
        return SerialSitePool()
    return ThreadedSitePool(workers)
