"""Deterministic seed derivation.

Every random stage derives its generator from (master seed, *string/int labels)
through a cryptographic hash, so results do not depend on call order or on how
work is sharded across threads: the generator for (grid k, pattern m) is the
same whether campaigns run serially or in a pool.
"""

import hashlib

import numpy as np

__all__ = ["derive_seed", "derive_rng"]


def _encode(part: int | str) -> bytes:
    if isinstance(part, bool):  # bool is an int subclass; refuse the ambiguity
        raise TypeError("seed label parts must be int or str, not bool")
    if isinstance(part, int):
        return b"i" + str(part).encode("ascii")
    if isinstance(part, str):
        return b"s" + part.encode("utf-8")
    raise TypeError(f"seed label parts must be int or str, got {type(part).__name__}")


def derive_seed(master: int, *parts: int | str) -> int:
    """Hash (master, *parts) into a 128-bit integer seed.

    Labels are length-prefixed before hashing so ("ab", "c") and ("a", "bc")
    derive different seeds.
    """
    h = hashlib.sha256()
    h.update(b"m" + str(int(master)).encode("ascii"))
    for part in parts:
        enc = _encode(part)
        h.update(len(enc).to_bytes(4, "little"))
        h.update(enc)
    return int.from_bytes(h.digest()[:16], "little")


def derive_rng(master: int, *parts: int | str) -> np.random.Generator:
    """PCG64 generator seeded from derive_seed(master, *parts)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(derive_seed(master, *parts))))
