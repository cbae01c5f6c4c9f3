"""Small shared helpers: canonical hashing and seed derivation."""

from __future__ import annotations

import hashlib
import json
from typing import Any


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def stable_hash(obj: Any) -> str:
    """Hex digest of an object's canonical JSON form."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def derive_seed(seed: int, *labels) -> int:
    """Derive an independent 63-bit seed from a root seed and a label path."""
    payload = f"{seed}:" + ":".join(str(x) for x in labels)
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)
