"""Stable sub-seed derivation."""

import hashlib


def derive_seed(*parts) -> int:
    """64-bit seed from a stable hash of ``parts`` (ints, strings, tuples).

    Independent of PYTHONHASHSEED, process and call order.
    """
    text = "\x1f".join(repr(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
