"""Seeding, hashing, and worker-pool helpers."""

from __future__ import annotations

import hashlib
import os
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

THREADS_ENV = "SSL_SPK_THREADS"


def rng_for(seed: int, *tags: str) -> np.random.Generator:
    """Independent, reproducible RNG stream for (seed, tags).

    SeedSequence mixing is platform-stable, so identical (seed, tags)
    give bit-identical draws everywhere.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    entropy.extend(zlib.crc32(t.encode("utf-8")) for t in tags)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def content_hash(data: bytes, n_hex: int = 12) -> str:
    return hashlib.sha256(data).hexdigest()[:n_hex]


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(1, n)


def parallel_map(fn, items):
    """Map `fn` over `items`, results in input order.

    Worker count comes from SSL_SPK_THREADS. Each item is processed
    independently, so the output is identical for any worker count.
    """
    items = list(items)
    n = worker_count()
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p
