"""Named substreams from one top-level seed, so every module draws
independent but reproducible randomness."""

from __future__ import annotations

import hashlib


def substream(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")
