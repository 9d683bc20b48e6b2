"""Named random streams split from a single run seed."""

from typing import Any

import numpy as np

# Stream ids are part of the reproducibility contract; append only.
STREAMS: dict[str, int] = {
    "data": 0,
    "init": 1,
    "dropout": 2,
    "sampling": 3,
    "shuffle": 4,
    "split": 5,
}


class SeedStreams:
    """
    Splits one u64 seed into independent generators keyed by stream name.

    Each stream is created lazily and cached, so repeated `get("dropout")` calls
    share state. `state()` / `restore()` round-trip every generator for resume.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError(f"Seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self._generators: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in STREAMS:
            raise KeyError(f"Unknown random stream '{name}'")
        if name not in self._generators:
            seq = np.random.SeedSequence(self.seed, spawn_key=(STREAMS[name],))
            self._generators[name] = np.random.default_rng(seq)
        return self._generators[name]

    def state(self) -> dict[str, Any]:
        return {name: gen.bit_generator.state for name, gen in self._generators.items()}

    def restore(self, state: dict[str, Any]) -> None:
        for name, bit_state in state.items():
            self.get(name).bit_generator.state = bit_state


def derive_seed(*parts: int) -> int:
    """Deterministic child seed from integer parts (scene index, proposal index, ...)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0])
