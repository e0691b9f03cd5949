from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def resolve_workers(workers: int) -> int:
    if workers < 0:
        raise ValueError("worker count must be >= 0")
    return workers or (os.cpu_count() or 1)


def ordered_map(fn, items, workers: int = 1) -> list:
    """Map ``fn`` over ``items``; results come back in input order regardless of scheduling."""
    items = list(items)
    n = resolve_workers(workers)
    if n == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(n, len(items))) as ex:
        return list(ex.map(fn, items))
