"""Named, counter-based random streams.

Every draw is taken from a fresh generator seeded by ``(seed, stream, counter)``,
so the full RNG state is a handful of integers that can be checkpointed and
restored exactly.
"""

from __future__ import annotations

import numpy as np

STREAMS = ("init", "dropout", "data")


class RngState:
    def __init__(self, seed: int, counters: dict[str, int] | None = None):
        self.seed = int(seed)
        self.counters = {name: 0 for name in STREAMS}
        if counters:
            unknown = set(counters) - set(STREAMS)
            if unknown:
                raise KeyError(f"unknown RNG streams {sorted(unknown)}")
            self.counters.update({k: int(v) for k, v in counters.items()})

    def next(self, stream: str) -> np.random.Generator:
        """Return the next generator of ``stream`` and advance its counter."""
        gen = self.peek(stream, self.counters[stream])
        self.counters[stream] += 1
        return gen

    def peek(self, stream: str, position: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, STREAMS.index(stream), int(position)])

    def state(self) -> dict:
        return {"seed": self.seed, "counters": dict(self.counters)}

    @classmethod
    def from_state(cls, state: dict) -> "RngState":
        return cls(state["seed"], state["counters"])

    def __repr__(self):
        return f"RngState(seed={self.seed}, counters={self.counters})"
