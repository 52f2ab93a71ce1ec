"""Counter-based random streams.

Every draw derives a fresh Philox generator keyed by (seed, counter), so a
stream is a pure function of its state: same (seed, counter) gives the same
values on every platform, regardless of how earlier draws were shaped.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

ALGORITHM = "philox4x64-keyed"


def derive_seed(seed: int, tag: str) -> int:
    """Derive a child seed from (seed, tag), stable across platforms and runs."""
    digest = hashlib.blake2b(f"{seed}:{tag}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class RngState:
    """Deterministic random source owned by the caller; no global state."""

    seed: int
    counter: int = 0
    algorithm: str = field(default=ALGORITHM)

    def _next_generator(self) -> np.random.Generator:
        gen = np.random.Generator(np.random.Philox(key=[self.seed % (1 << 64), self.counter]))
        self.counter += 1
        return gen

    def child(self, tag: str) -> "RngState":
        """Independent substream named by ``tag``; does not advance this stream."""
        return RngState(seed=derive_seed(self.seed, tag))

    def normal(self, shape: tuple[int, ...], scale: float = 1.0) -> np.ndarray:
        return self._next_generator().normal(0.0, scale, size=shape)

    def uniform(self, shape: tuple[int, ...]) -> np.ndarray:
        return self._next_generator().uniform(0.0, 1.0, size=shape)

    def integers(self, low: int, high: int, size: int | tuple[int, ...] | None = None) -> np.ndarray | int:
        out = self._next_generator().integers(low, high, size=size)
        return out

    def permutation(self, n: int) -> np.ndarray:
        return self._next_generator().permutation(n)

    def sample_indices(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), in draw order."""
        if k > n:
            raise ValueError(f"cannot sample {k} from {n}")
        return self.permutation(n)[:k]
