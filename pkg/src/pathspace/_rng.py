"""Counter-based random streams.

Every random draw is addressed by a key tuple ``(seed, tag, block, chunk)``
and produced by a Philox generator seeded from that key, so the numbers a
given path or lattice site sees never depend on how work is split across
workers or in which order blocks are evaluated.
"""

from __future__ import annotations

import zlib

import numpy as np

#: Number of paths sharing one stream; fixed so results do not depend on
#: worker count or on how a caller slices the path index range.
BLOCK = 4096


def tag(name: str) -> int:
    return zlib.crc32(name.encode())


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the stream addressed by ``(seed, *key)``."""
    if seed < 0 or any(k < 0 for k in key):
        raise ValueError("seed and stream keys must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


def block_normals(seed: int, name: str, start: int, count: int, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normals of shape ``(count, *shape)`` for stream items
    ``start .. start+count-1``.

    Item ``i`` always receives the same numbers for a given ``(seed, name,
    shape)``, whatever ``start``/``count`` window it is requested in.
    """
    out = np.empty((count, *shape))
    t = tag(name)
    i = start
    while i < start + count:
        b = i // BLOCK
        lo = i - b * BLOCK
        hi = min(BLOCK, start + count - b * BLOCK)
        z = stream(seed, t, b).standard_normal((BLOCK, *shape))
        out[i - start:i - start + hi - lo] = z[lo:hi]
        i = b * BLOCK + hi
    return out
