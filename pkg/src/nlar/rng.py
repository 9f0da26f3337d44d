"""Reproducible random streams.

All randomness in the package flows from a single integer seed through
named substreams backed by the counter-based Philox generator.  A stream
is addressed by a path of strings/integers, e.g.
``substream(seed, "snl", round_idx, "simulate", episode_idx)``; the same
path always yields the same stream regardless of execution order, which
makes datasets and archives reproducible under any parallel schedule.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _path_entropy(path):
    """Map a path element to a stable 64-bit integer."""
    out = []
    for item in path:
        if isinstance(item, (int, np.integer)):
            out.append(int(item) & 0xFFFFFFFFFFFFFFFF)
        else:
            digest = hashlib.sha256(str(item).encode("utf-8")).digest()
            out.append(int.from_bytes(digest[:8], "little"))
    return out


def substream(seed: int, *path) -> np.random.Generator:
    """Return the Philox generator for the named substream of ``seed``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + _path_entropy(path)
    return np.random.Generator(np.random.Philox(key=_key_from(entropy)))


def stream_key(seed: int, *path) -> int:
    """64-bit key for the substream, for handing to compiled kernels."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + _path_entropy(path)
    digest = hashlib.sha256(repr(entropy).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _key_from(entropy):
    digest = hashlib.sha256(repr(entropy).encode()).digest()
    return int.from_bytes(digest[:16], "little")
