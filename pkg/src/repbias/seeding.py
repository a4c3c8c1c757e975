"""Named random sub-streams derived from one root seed."""

import zlib

import numpy as np


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Generator for stage ``name``; changing one stage's draws never shifts another's."""
    return np.random.default_rng([int(root_seed), zlib.crc32(name.encode("utf-8"))])


def subseed(root_seed: int, name: str) -> int:
    return int(substream(root_seed, name).integers(0, 2**31 - 1))
