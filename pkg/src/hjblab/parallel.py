"""Order-preserving task fan-out.

Tasks handed to parallel_map must be independent and internally seeded;
results are assembled in submission order, so the output is bit-identical
for any worker count.
"""

from concurrent.futures import ThreadPoolExecutor

__all__ = ["parallel_map"]


def parallel_map(fn, items, jobs: int = 1) -> list:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=int(jobs)) as pool:
        return list(pool.map(fn, items))
