"""Counter-based random streams keyed by (seed, stream, sample index).

Samples are grouped in fixed blocks of ``BLOCK_SIZE``; the noise of a block
comes from a Philox generator keyed by ``(seed, stream..., block)``.  The
noise seen by sample ``i`` therefore depends only on the seed, the stream tag
and ``i`` -- never on how blocks are scheduled over workers.
"""
from __future__ import annotations

import numpy as np

BLOCK_SIZE = 4096

# stream tags
IS_STREAM = 1
DIRECT_STREAM = 2

_MASK64 = (1 << 64) - 1


def block_generator(seed: int, stream: tuple[int, ...], block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK64,
                                spawn_key=tuple(int(s) for s in stream) + (int(block),))
    return np.random.Generator(np.random.Philox(ss))


def block_ranges(start: int, stop: int, block_size: int = BLOCK_SIZE):
    """Yield ``(block, lo, hi)`` with sample indices ``[lo, hi)`` inside each block."""
    if stop <= start:
        return
    for block in range(start // block_size, (stop - 1) // block_size + 1):
        lo = max(start, block * block_size)
        hi = min(stop, (block + 1) * block_size)
        yield block, lo, hi


class BlockNoise:
    """Standard normal d-vectors for samples ``[lo, hi)`` of one block, step by step.

    Every step draws the full block so that a sample's noise does not depend on
    which sub-range of the block is requested.
    """

    def __init__(self, seed: int, stream: tuple[int, ...], block: int, lo: int, hi: int,
                 dim: int, block_size: int = BLOCK_SIZE):
        self._rng = block_generator(seed, stream, block)
        self._a = lo - block * block_size
        self._b = hi - block * block_size
        self._shape = (block_size, dim)

    def __call__(self) -> np.ndarray:
        return self._rng.standard_normal(self._shape)[self._a:self._b]
