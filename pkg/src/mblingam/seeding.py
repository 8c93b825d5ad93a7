"""Deterministic seed derivation.

All randomness in the package flows from one integer master seed. Child seeds
are a pure function of the master seed and a tuple of integer keys (dataset,
scale, replicate, ...), so results never depend on how work is scheduled.
"""
import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(master: int, *keys: int) -> int:
    """64-bit child seed for ``(master, *keys)`` via numpy's SeedSequence hash."""
    ss = np.random.SeedSequence([int(master) & MASK64, *(int(k) for k in keys)])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def rng_for(master: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master) & MASK64, *(int(k) for k in keys)]))
