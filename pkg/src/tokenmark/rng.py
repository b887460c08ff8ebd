"""Seeded, splittable random streams.

Each component asks for its own generator by name, so adding a consumer in
one place never shifts the random numbers another place sees.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def make_rng(seed: int, *labels: str | int) -> np.random.Generator:
    key = [int(seed)] + [(_label_key(x) if isinstance(x, str) else int(x)) for x in labels]
    return np.random.default_rng(np.random.SeedSequence(key))


def derive_seed(seed: int, *labels: str | int) -> int:
    return int(make_rng(seed, *labels).integers(0, 2**31 - 1))
