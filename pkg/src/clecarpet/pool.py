"""Ordered task execution on a bounded process pool."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

__all__ = ["ordered_map"]


def ordered_map(fn, tasks, workers: int = 1) -> list:
    """``[fn(t) for t in tasks]``, optionally spread over ``workers`` processes.

    Results come back in task order, so any fold over them is independent
    of the worker count.
    """
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as ex:
        return list(ex.map(fn, tasks))
