"""Counter-based random streams.

Every stochastic component draws from a Philox generator keyed by
(root seed, purpose, call counter), so a run's randomness is a pure
function of its seed and the counters are trivially checkpointable.
"""

import numpy as np

from .errors import ParameterError

# Purpose tags, one per stochastic subsystem.
PURPOSE_INIT = 1
PURPOSE_DROPOUT = 2
PURPOSE_SAMPLER = 3
PURPOSE_SYNTH = 4

_MAX_COUNTER = 1 << 32


class SeedStream:
    """A named stream of one-shot generators; state is (seed, purpose, counter)."""

    def __init__(self, seed, purpose, counter=0):
        if not 0 <= counter < _MAX_COUNTER:
            raise ParameterError(f"stream counter {counter} out of range")
        if not 0 <= int(seed) < 1 << 64:
            raise ParameterError(f"seed {seed} out of range for a u64 key")
        self.seed = int(seed)
        self.purpose = int(purpose)
        self.counter = int(counter)

    def generator(self):
        """Return a fresh Generator for one logical draw and advance the counter."""
        if self.counter >= _MAX_COUNTER:
            raise ParameterError("stream counter exhausted")
        key = [self.seed, (self.purpose << 32) | self.counter]
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key))

    def peek_generator(self):
        """Like generator() but without advancing the counter."""
        key = [self.seed, (self.purpose << 32) | self.counter]
        return np.random.Generator(np.random.Philox(key=key))

    def state(self):
        return (self.seed, self.purpose, self.counter)

    @classmethod
    def from_state(cls, state):
        seed, purpose, counter = state
        return cls(seed, purpose, counter)


class DropoutRng(SeedStream):
    """Dropout mask stream; one counter tick per mask keeps runs bit-reproducible."""

    def __init__(self, seed, counter=0):
        super().__init__(seed, PURPOSE_DROPOUT, counter)

    def mask(self, shape, p):
        """Boolean keep-mask: True with probability 1-p."""
        if not 0.0 <= p < 1.0:
            raise ParameterError(f"drop probability must be in [0, 1), got {p}")
        gen = self.generator()
        return gen.random(size=shape) >= p
