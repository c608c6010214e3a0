"""Named seed derivation: every subsystem draws from ``seed xor hash(purpose)``."""

import hashlib

_MASK = (1 << 63) - 1


def derive_seed(seed: int, *purpose) -> int:
    tag = "/".join(str(p) for p in purpose).encode()
    h = int.from_bytes(hashlib.sha256(tag).digest()[:8], "little")
    return (int(seed) ^ h) & _MASK
