"""Seeded random streams derived from one root seed by fixed labels."""

from __future__ import annotations

import zlib

import numpy as np


def label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


class RngStreams:
    """Named, independent generators under one root seed.

    A stream depends only on ``(seed, label)``, so adding a consumer never
    shifts the draws seen by another.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def __call__(self, label: str) -> np.random.Generator:
        gen = self._streams.get(label)
        if gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=(label_key(label),))
            gen = np.random.Generator(np.random.PCG64(ss))
            self._streams[label] = gen
        return gen

    def state_dict(self) -> dict:
        return {"seed": self.seed, "streams": {k: g.bit_generator.state for k, g in sorted(self._streams.items())}}

    @classmethod
    def from_state(cls, state: dict) -> "RngStreams":
        out = cls(state["seed"])
        for label, st in state["streams"].items():
            gen = out(label)
            gen.bit_generator.state = st
        return out
