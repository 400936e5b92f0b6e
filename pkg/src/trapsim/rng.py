"""Counter-based random streams keyed by ``(seed, replica, purpose)``.

Every random draw in the package comes from a :class:`RngStream`. The stream
for a given key is a Philox generator whose key is derived from the triple, so
replica ``r`` produces the same numbers whatever order or thread it runs in.
"""

from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np


def _purpose_id(purpose) -> int:
    if isinstance(purpose, (int, np.integer)):
        return int(purpose)
    return zlib.crc32(str(purpose).encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    seed: int
    replica: int = 0
    purpose: str | int = "default"

    def key(self) -> np.ndarray:
        ss = np.random.SeedSequence(
            entropy=int(self.seed) & ((1 << 64) - 1),
            spawn_key=(int(self.replica), _purpose_id(self.purpose)),
        )
        return ss.generate_state(2, dtype=np.uint64)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key()))


def stream(seed: int, replica: int = 0, purpose: str | int = "default") -> np.random.Generator:
    """Shorthand for ``RngStream(seed, replica, purpose).generator()``."""
    return RngStream(seed, replica, purpose).generator()


def worker_count() -> int:
    """Worker cap from ``TRAPSIM_THREADS`` (default: CPU count)."""
    raw = os.environ.get("TRAPSIM_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            n = 1
        return max(1, n)
    return max(1, os.cpu_count() or 1)


def parallel_map(func, items, workers: int | None = None) -> list:
    """Ordered map over ``items`` on a thread pool.

    Results are returned in input order so reductions downstream are
    independent of scheduling. Numba kernels release the GIL.
    """
    items = list(items)
    n = worker_count() if workers is None else max(1, workers)
    if n == 1 or len(items) <= 1:
        return [func(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(func, items))
