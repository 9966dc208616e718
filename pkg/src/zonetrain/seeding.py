"""Labelled seed derivation: one root seed fans out into independent streams."""
from __future__ import annotations

import zlib

import numpy as np


def derive_seed(root: int, *labels) -> int:
    """Stable 63-bit seed for ``(root, *labels)``; labels may be ints or strings."""
    words = [int(root) & 0xFFFFFFFF, (int(root) >> 32) & 0xFFFFFFFF]
    for lab in labels:
        if isinstance(lab, (int, np.integer)):
            words.append(int(lab) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(lab).encode()))
    return int(np.random.SeedSequence(words).generate_state(2, dtype=np.uint32).view(np.uint64)[0]
               >> np.uint64(1))


def rng_for(root: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))
