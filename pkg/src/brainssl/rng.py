"""Counter-based random streams with named substreams.

Every stochastic component in this package draws from a stream addressed
by (master seed, label path) instead of sharing one sequential generator.
Two consequences: results do not depend on the order in which samples are
processed, and any substream can be reconstructed in isolation (e.g. one
augmentation of one scan in one epoch).
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_from_path(seed: int, path: tuple[str, ...]) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode("utf-8"))
    for label in path:
        h.update(b"/")
        h.update(label.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class SeedStream:
    """A point in a seed tree; children are addressed by string labels."""

    def __init__(self, seed: int, _path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = _path

    def child(self, *labels) -> "SeedStream":
        return SeedStream(self.seed, self.path + tuple(str(x) for x in labels))

    def generator(self) -> np.random.Generator:
        """Fresh Philox generator keyed by this stream's (seed, path)."""
        return np.random.Generator(np.random.Philox(key=_key_from_path(self.seed, self.path)))

    def integer(self, bits: int = 63) -> int:
        """Deterministic integer derived from this stream (no state consumed)."""
        return _key_from_path(self.seed, self.path) & ((1 << bits) - 1)

    def __repr__(self) -> str:
        return f"SeedStream(seed={self.seed}, path={'/'.join(self.path) or '.'})"


def spawn_generator(seed: int, *labels) -> np.random.Generator:
    """Shorthand for SeedStream(seed).child(*labels).generator()."""
    return SeedStream(seed).child(*labels).generator()


def derive_seed(seed: int, *labels) -> int:
    """Stable 63-bit seed for a named substream (e.g. per-epoch seeds)."""
    return SeedStream(seed).child(*labels).integer()
