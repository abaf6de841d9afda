"""Counter-based random streams.

Every source of randomness in the package is a Philox generator whose
128-bit key is (seed, tag), where the tag encodes a purpose and an index
(step number, epoch number, image number, parameter name hash).  Streams
are therefore independent, reproducible from the seed alone, and need no
mutable generator state to be checkpointed: resuming at step t re-derives
exactly the stream the uninterrupted run would have used.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Purpose identifiers baked into the high byte of the tag.
INIT = 1
DROPOUT = 2
SHUFFLE = 3
SAMPLE = 4
DATA = 5


def stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    """Generator for (seed, purpose, index); identical arguments give identical streams."""
    tag = (np.uint64(purpose) << np.uint64(56)) | np.uint64(index & (2**56 - 1))
    key = np.array([np.uint64(seed & (2**64 - 1)), tag], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by a string, for per-parameter initialization draws."""
    digest = hashlib.blake2b(name.encode(), digest_size=7).digest()
    return stream(seed, INIT, int.from_bytes(digest, "little"))
