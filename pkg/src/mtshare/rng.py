"""Named, independently-seeded RNG streams.

Separate streams for weight init, Gumbel noise, dropout, and data
shuffling, so that ablations can perturb one source of randomness at a
time. Stream states round-trip through plain dicts for checkpointing.
"""

import numpy as np

STREAM_NAMES = ("weights", "gumbel", "dropout", "data")


class RngStreams:
    def __init__(self, weights=0, gumbel=1, dropout=2, data=3):
        self.seeds = {"weights": weights, "gumbel": gumbel, "dropout": dropout, "data": data}
        self._gens = {name: np.random.Generator(np.random.PCG64(seed))
                      for name, seed in self.seeds.items()}

    @classmethod
    def from_base_seed(cls, seed):
        # derived stream seeds keep streams distinct under a single knob
        return cls(weights=seed, gumbel=seed + 1000, dropout=seed + 2000, data=seed + 3000)

    def __getattr__(self, name):
        if name in STREAM_NAMES:
            return self._gens[name]
        raise AttributeError(name)

    def state(self):
        return {name: self._gens[name].bit_generator.state for name in STREAM_NAMES}

    def set_state(self, state):
        for name in STREAM_NAMES:
            self._gens[name].bit_generator.state = state[name]
