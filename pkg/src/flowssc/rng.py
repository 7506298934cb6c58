"""Named random streams derived from one global seed.

Each consumer asks for a stream by purpose string; the string is hashed into
the seed sequence, so adding a new consumer never shifts existing streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(purpose: str) -> int:
    return int.from_bytes(hashlib.sha256(purpose.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, purpose: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), stream_key(purpose)])))
