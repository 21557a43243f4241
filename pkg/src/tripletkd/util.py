"""Shared helpers: seeded RNG derivation and content digests."""

from __future__ import annotations

import hashlib
import json

import numpy as np


def derive_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent generator for (seed, *keys).

    Stable across runs and platforms; string keys are hashed so callers can
    tag streams by purpose ("augment", "shuffle", ...) without collisions.
    """
    entropy: list[int] = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            digest = hashlib.sha256(key.encode("utf-8")).digest()
            entropy.append(int.from_bytes(digest[:4], "little"))
        else:
            entropy.append(int(key) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def stable_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, no whitespace drift)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_digest(parts: dict[str, bytes]) -> str:
    """sha256 over named byte blobs, order-independent."""
    h = hashlib.sha256()
    for name in sorted(parts):
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
        h.update(parts[name])
        h.update(b"\x01")
    return h.hexdigest()


def params_digest(params: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Integrity hash of a parameter dict plus optional JSON-able metadata."""
    parts = {name: np.ascontiguousarray(arr).tobytes() for name, arr in params.items()}
    if meta is not None:
        parts["__meta__"] = stable_json(meta).encode("utf-8")
    return content_digest(parts)
