"""Named, splittable random streams.

Every stream is a PCG64 generator keyed by ``(seed, crc32(tag), *extra)``
through ``numpy.random.SeedSequence``; the same key gives the same stream on
every platform.
"""

from __future__ import annotations

import hashlib
import json
import zlib

import numpy as np


def tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *extra: int) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, tag_id(tag), *(int(e) & 0xFFFFFFFFFFFFFFFF for e in extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def stable_hash(obj, length: int = 16) -> str:
    """Hex digest of the canonical JSON encoding of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:length]


def derive_seed(base_seed: int, key: str) -> int:
    digest = hashlib.sha256(f"{int(base_seed)}:{key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
