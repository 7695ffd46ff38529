"""Seed splitting.

One 64-bit root seed feeds every component; a component's generator is
``numpy.random.default_rng([root, crc32(name)])``, so adding a component
never shifts the streams of the others.
"""

import zlib

import numpy as np


def component_rng(seed: int, name: str) -> np.random.Generator:
    if not 0 <= int(seed) < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def derive_seed(seed: int, name: str) -> int:
    """A child 63-bit seed for a named sub-run."""
    return int(component_rng(seed, name).integers(2**63))
