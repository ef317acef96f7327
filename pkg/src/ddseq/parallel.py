"""Tiny shared-memory map helper for per-subdomain work.

Results come back in index order regardless of the worker count, so any
reduction over them is deterministic; workers=1 runs serially.
"""

from concurrent.futures import ThreadPoolExecutor


def map_indexed(fn, n, workers=1):
    if workers <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))
