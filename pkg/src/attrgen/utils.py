"""Small shared helpers."""

from __future__ import annotations

import hashlib


def derive_seed(base: int, *parts) -> int:
    """Stable sub-seed from a base seed plus a tag path.

    Uses sha256 so the result does not depend on Python hash randomization
    or platform word size.
    """
    key = ":".join([str(base), *map(str, parts)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def stable_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
