"""
Counter-based random streams.

Each concern (masking, sampling, dropout, ...) draws from its own Philox stream
keyed by (seed, stream id, step), so switching one feature on or off never shifts
the draws another feature sees, and any step can be regenerated without replay.
"""
import enum
from dataclasses import dataclass

import numpy as np


class Stream(enum.IntEnum):
    INIT = 0
    MASKING = 1
    SAMPLING = 2
    DROPOUT = 3
    SHUFFLE = 4
    ANALYSIS = 5
    SPLIT = 6
    MONTE_CARLO = 7


@dataclass(frozen=True)
class RngState:
    seed: int
    stream: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")

    def at(self, counter: int = 0) -> np.random.Generator:
        """Generator for one position of this stream (e.g. a training step)."""
        key = np.random.SeedSequence([int(self.seed), int(self.stream), int(counter)])
        return np.random.Generator(np.random.Philox(key))

    def substream(self, stream: int) -> 'RngState':
        return RngState(self.seed, int(stream))


def stream_generator(seed: int, stream: Stream, counter: int = 0) -> np.random.Generator:
    return RngState(seed, int(stream)).at(counter)
