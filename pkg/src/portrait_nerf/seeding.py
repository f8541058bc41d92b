"""Labeled random sub-streams derived from one master seed."""

import zlib

import numpy as np


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def derive_seed(seed: int, label: str) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _label_key(label)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for ``label`` under ``seed``; stable across runs."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _label_key(label)]))
