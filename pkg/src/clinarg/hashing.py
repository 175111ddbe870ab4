"""Stable hashing helpers.

Python's built-in ``hash()`` is randomized per process, so every piece of
seeded behaviour (mock generation, stratified sampling, rater shuffles)
derives its substream from a SHA-256 digest of canonical JSON instead.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any


def canonical_json(value: Any) -> str:
    """Serialize a JSON-able value with sorted keys and no whitespace."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def stable_digest(*parts: Any) -> str:
    return hashlib.sha256(canonical_json(list(parts)).encode("utf-8")).hexdigest()


def stable_int(*parts: Any) -> int:
    """A 64-bit integer usable as an RNG seed, stable across processes."""
    return int(stable_digest(*parts)[:16], 16)
