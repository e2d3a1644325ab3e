"""Thread-pool mapping for per-pair denoising solves.

Set VARILEARN_THREADS to parallelize over training pairs. Sparse
factorization and the dense kernel work release the GIL, so threads are
enough; results always come back in input order so runs stay deterministic
regardless of scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def thread_count() -> int:
    raw = os.environ.get("VARILEARN_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    if n == 0:
        return os.cpu_count() or 1
    return max(1, n)


def pair_map(fn, items):
    """Map fn over items, in order, threading only when configured."""
    items = list(items)
    n = thread_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
