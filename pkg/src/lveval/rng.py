"""Deterministic random streams.

Every stochastic operation draws from a counter-based Philox generator
keyed by (master seed, purpose tag, index).  Streams for different tags
or indices are statistically independent, so adding a new operation (new
tag) never perturbs the draws of existing ones, and per-item streams
(e.g. one per resampled subset) can be opened in any order.
"""

import hashlib

import numpy as np


def _tag_words(tag: str) -> tuple[int, ...]:
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def substream(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Generator for the (seed, tag, index) stream.

    Identical arguments yield identical streams on every platform.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)]
    entropy.extend(_tag_words(tag))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
