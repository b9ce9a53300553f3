"""Named, counter-based random streams.

Every source of randomness in the package draws from a Philox generator
whose 128-bit key is derived from (seed, stream name parts). Distinct
names give statistically independent streams, and the same (seed, name)
always reproduces the same sequence, independent of call order elsewhere.
"""

import hashlib

import numpy as np


def stream(seed: int, *names) -> np.random.Generator:
    """Return a fresh generator for the stream identified by ``names``."""
    tag = "/".join(str(n) for n in names)
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def derive(seed: int, *names) -> int:
    """Deterministic non-negative integer seed for a named substream."""
    tag = "/".join(str(n) for n in names)
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[16:24], "little") >> 1
