"""Seeded, splittable random streams.

Every consumer asks for a named substream of one root seed. A substream is a
numpy ``PCG64`` generator seeded from ``SeedSequence(seed, spawn_key=(crc32(name), *extra))``,
so the same (seed, name, extra) always yields the same stream regardless of
what other streams were drawn before it.

Names used by the package: ``data``, ``init``, ``noise``, ``timesteps``,
``drop`` and ``eval``.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(_key(name), *map(int, extra)))
    return np.random.Generator(np.random.PCG64(ss))


def torch_generator(seed: int, name: str, *extra: int) -> torch.Generator:
    """A CPU torch generator whose seed is derived from the named substream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(_key(name), *map(int, extra)))
    g = torch.Generator()
    g.manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF))
    return g
