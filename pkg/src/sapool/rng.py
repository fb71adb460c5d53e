"""Counter-based deterministic random streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# distance between consecutive streams handed out by ``RngState.next``
_STREAM_STRIDE = 1 << 40


@dataclass
class RngState:
    """A (seed, counter) pair backed by the Philox counter-based generator.

    The same pair always produces the same stream, independently of platform,
    because Philox is a pure function of key and counter.
    """

    seed: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=self.seed & ((1 << 64) - 1), counter=self.counter)
        return np.random.Generator(bitgen)

    def next(self) -> np.random.Generator:
        """Return a generator for the current counter and advance past it."""
        gen = self.generator()
        self.counter += _STREAM_STRIDE
        return gen

    def fork(self, tag: int) -> "RngState":
        """Independent child state, stable for a given ``tag``."""
        mixed = np.random.SeedSequence([self.seed & ((1 << 64) - 1), tag]).generate_state(1, np.uint64)
        return RngState(int(mixed[0]))
