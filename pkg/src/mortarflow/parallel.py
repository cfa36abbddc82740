"""Deterministic parallel map: results always merge in input order."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

_threads = 1


def set_threads(n):
    global _threads
    _threads = max(1, int(n))


def get_threads():
    return _threads


def ordered_map(fn, items, threads=None):
    """Map `fn` over `items`; with more than one worker the evaluation is
    concurrent but the returned list preserves input order."""
    items = list(items)
    n = threads if threads is not None else _threads
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
