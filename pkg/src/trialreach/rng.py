"""Deterministic random-stream derivation and order-preserving parallel map.

Every stochastic component draws from a substream keyed by the master
seed plus a component label (and, for replicated work, the replicate
index). Results therefore do not depend on execution order or thread
count.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(*keys) -> np.random.Generator:
    """Return a Generator keyed by ``keys`` (ints or labels).

    The same key tuple always yields the same stream, on any platform
    and under any thread count.
    """
    if not keys:
        raise ValueError("substream requires at least one key")
    entropy = [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def spawn_seed(*keys) -> int:
    """Derive a 63-bit integer seed from ``keys`` for nested components."""
    entropy = [_key_to_int(k) for k in keys]
    digest = hashlib.sha256(repr(entropy).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def parallel_map(
    fn: Callable[[T], R],
    items: Sequence[T] | Iterable[T],
    threads: int = 1,
) -> list[R]:
    """Apply ``fn`` to each item, preserving input order in the result.

    With ``threads > 1`` the work runs on a thread pool; ``fn`` must not
    share mutable state between items. Output order is by input index
    regardless of completion order, so results match a sequential run.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
