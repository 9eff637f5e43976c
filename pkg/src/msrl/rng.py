"""Named random streams derived from one seed.

Each subsystem draws from its own generator keyed by a fixed label, so adding
a consumer never shifts the numbers another consumer sees.
"""

from __future__ import annotations

import zlib

import numpy as np


def label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def stream(seed: int, label: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), label_key(label)])))


class Streams:
    """Lazily created named generators sharing one root seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens: dict[str, np.random.Generator] = {}

    def __getitem__(self, label: str) -> np.random.Generator:
        if label not in self._gens:
            self._gens[label] = stream(self.seed, label)
        return self._gens[label]

    def state(self) -> dict:
        return {"seed": self.seed, "streams": {k: g.bit_generator.state for k, g in sorted(self._gens.items())}}

    @classmethod
    def from_state(cls, state: dict) -> "Streams":
        out = cls(state["seed"])
        for label, st in state["streams"].items():
            gen = stream(out.seed, label)
            gen.bit_generator.state = st
            out._gens[label] = gen
        return out
