"""Name-keyed derivation of per-stream seeds from one root seed.

Every source of randomness in the package (parameter init, chip synthesis,
epoch shuffling) draws from its own stream, derived deterministically from
the single root seed and a string key. Streams for different keys are
independent; the same (root, key) pair always yields the same stream.
"""

import hashlib


def derive_seed(root: int, key: str) -> int:
    """Return a 64-bit seed unique to (root, key)."""
    digest = hashlib.sha256(f"{root}:{key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
