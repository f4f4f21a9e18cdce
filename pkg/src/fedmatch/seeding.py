"""Splittable random streams derived from one master seed.

A stream is keyed by ``(seed, purpose, *ids)``; string parts are hashed with
CRC-32 so keys are stable across processes.  Adding a client never shifts
another client's stream.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *words: str | int) -> np.random.Generator:
    key = [int(seed)]
    for w in words:
        key.append(zlib.crc32(w.encode("utf-8")) if isinstance(w, str) else int(w))
    return np.random.default_rng(np.random.SeedSequence(key))


def key_words(seed: int, *words: str | int) -> list[int]:
    return [int(seed)] + [zlib.crc32(w.encode("utf-8")) if isinstance(w, str) else int(w) for w in words]
