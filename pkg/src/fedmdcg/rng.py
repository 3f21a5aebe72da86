"""Named, seedable random streams with a portable bit generator.

Every source of randomness in the simulator is a ``(name, seed)`` pair
mapped to a Philox counter-based generator whose 128-bit key is derived
by SHA-256 from the pair. Philox produces identical sequences on every
platform, so equal pairs replay equal draws regardless of how many other
streams were consumed in between.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(name: str, seed: int) -> int:
    digest = hashlib.sha256(f"{int(seed)}\x1f{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def named_generator(name: str, seed: int) -> np.random.Generator:
    """Independent generator for the stream identified by (name, seed)."""
    return np.random.Generator(np.random.Philox(key=stream_key(name, seed)))


class RngStream:
    """A named stream handle; equal (name, seed) replay equal sequences."""

    def __init__(self, name: str, seed: int):
        self.name = name
        self.seed = int(seed)
        self.gen = named_generator(name, seed)

    def normal(self, shape) -> np.ndarray:
        return self.gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.gen.uniform(low, high, shape)

    def choice(self, options, size: int, p=None, replace: bool = True) -> np.ndarray:
        return self.gen.choice(options, size=size, p=p, replace=replace)

    def dirichlet(self, alpha) -> np.ndarray:
        return self.gen.dirichlet(alpha)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(name={self.name!r}, seed={self.seed})"
