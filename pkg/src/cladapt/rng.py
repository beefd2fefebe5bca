"""Deterministic counter-based random streams.

Every stochastic choice in the package (parameter init, corpus synthesis,
batch shuffling, memory sampling) draws from a Philox generator whose key
is derived by hashing a tuple of labels.  Streams are therefore independent
of creation order, reproducible across processes, and safe to regenerate
per item (e.g. one stream per utterance) regardless of thread count.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_key(*parts) -> int:
    """Hash a tuple of labels (ints, floats, strings, bytes) into a 128-bit key."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bytes):
            tag, payload = b"b", part
        elif isinstance(part, str):
            tag, payload = b"s", part.encode("utf-8")
        elif isinstance(part, (bool, np.bool_)):
            tag, payload = b"i", str(int(part)).encode("ascii")
        elif isinstance(part, (int, np.integer)):
            tag, payload = b"i", str(int(part)).encode("ascii")
        elif isinstance(part, float):
            tag, payload = b"f", repr(float(part)).encode("ascii")
        else:
            raise TypeError(f"cannot derive an RNG key from {type(part).__name__}")
        h.update(tag)
        h.update(len(payload).to_bytes(4, "little"))
        h.update(payload)
    return int.from_bytes(h.digest()[:16], "little")


def generator(*parts) -> np.random.Generator:
    """Independent generator for the stream named by ``parts``."""
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))
