"""Allocation counters for meta-level objects.

Used to check that nothing meta-level is built when no behavior is asked for.
"""

from collections import Counter
from contextlib import contextmanager

_counts: Counter = Counter()


def bump(name: str, n: int = 1) -> None:
    _counts[name] += n


def get(name: str) -> int:
    return _counts[name]


def reset() -> None:
    _counts.clear()


@contextmanager
def counting():
    """Reset the counters, yield a live view of them."""
    reset()
    yield _counts
