"""Deterministic RNG stream derivation.

Every stage of the pipeline draws randomness from a generator derived from
(master seed, stage name, item index...). Derivation is a SHA-256 hash, so
streams are independent of execution order and safe to draw in parallel.
"""

from __future__ import annotations

import hashlib

import numpy as np

_DOMAIN = b"maskdiff.rng.v1"


def derive_seed(master: int, *parts: object) -> int:
    """Hash (master, *parts) into a 64-bit stream seed.

    Parts may be ints, strings, or anything with a stable str(); they are
    length-prefixed so ("ab", "c") and ("a", "bc") differ.
    """
    h = hashlib.sha256()
    h.update(_DOMAIN)
    h.update(int(master).to_bytes(8, "little", signed=False))
    for part in parts:
        raw = str(part).encode("utf-8")
        h.update(len(raw).to_bytes(4, "little"))
        h.update(raw)
    return int.from_bytes(h.digest()[:8], "little")


def stream(master: int, *parts: object) -> np.random.Generator:
    """Generator for the stream named by (master, *parts)."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, *parts)))


def spawn(rng_or_seed: int | np.random.Generator, *parts: object) -> np.random.Generator:
    """Derive a child stream from a seed; generators pass through unchanged.

    Lets API entry points accept either a bare seed or a ready generator.
    """
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return stream(int(rng_or_seed), *parts)
