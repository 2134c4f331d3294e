"""Counter-based random streams for schedule-independent reproducibility.

Every random draw in a run is pulled from a substream addressed by
``(seed, *path)`` where the path mixes integers (iteration, particle index)
and short purpose tags ("noise", "rotation", ...). Streams derived from
distinct paths are statistically independent Philox streams, so the order
in which work is scheduled cannot change any result.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream"]


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Return a fresh generator for the stream addressed by (seed, *path).

    The same address always yields the same stream; distinct addresses yield
    independent streams. Strings and integers hash differently, so
    ("a", 1) and ("a1",) do not collide.
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for part in path:
        if isinstance(part, str):
            h.update(b"s")
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        else:
            h.update(b"i")
            h.update(int(part).to_bytes(8, "little", signed=True))
    key = np.frombuffer(h.digest(), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
