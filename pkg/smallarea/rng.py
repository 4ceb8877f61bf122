"""Named, counter-based random streams.

Every random draw in the package comes from `stream(seed, label, *indices)`:
a Philox generator keyed by a SeedSequence whose spawn key is the label hash
followed by the indices. The same (seed, label, indices) always gives the same
stream, whichever worker asks for it.
"""
import zlib
import numpy as np


def label_code(label: str) -> int:
    """Stable 32-bit code for a component label."""
    return zlib.crc32(label.encode("utf-8")) & 0xFFFFFFFF


def seed_sequence(seed: int, label: str, *indices: int) -> np.random.SeedSequence:
    if seed is None:
        raise ValueError("A seed is required; wall-clock seeding is not supported.")
    key = (label_code(label), *(int(i) for i in indices))
    return np.random.SeedSequence(int(seed), spawn_key=key)


def stream(seed: int, label: str, *indices: int) -> np.random.Generator:
    """Generator for the named stream (seed, label, indices...)."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, label, *indices)))


def derive_seed(seed: int, label: str, *indices: int) -> int:
    """Integer child seed, for handing a whole sub-pipeline its own seed."""
    return int(seed_sequence(seed, label, *indices).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


__all__ = ["label_code", "seed_sequence", "stream", "derive_seed"]
