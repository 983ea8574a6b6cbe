"""Seed derivation.

Every random stream in the package comes from ``make_rng(root, *keys)``. The
keys are mixed into a ``numpy.random.SeedSequence`` spawn key, so streams for
different keys are independent and adding a new key never perturbs existing
streams. String keys are mapped to integers with CRC-32, which is stable
across processes (unlike ``hash``).
"""

import zlib

import numpy as np

Key = int | str


def _key_to_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"Seed keys must be non-negative, got {key}")
    return int(key)


def seed_sequence(root: int, *keys: Key) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(root), spawn_key=tuple(_key_to_int(k) for k in keys))


def derive_seed(root: int, *keys: Key) -> int:
    """Derives a 32-bit integer seed from a root seed and a key path.

    Args:
        root: The root seed.
        keys: The key path, for example ``(replicate_index,)``.

    Returns:
        A seed which can be passed back in as another root.
    """

    return int(seed_sequence(root, *keys).generate_state(1, dtype=np.uint32)[0])


def make_rng(root: int, *keys: Key) -> np.random.Generator:
    """Makes an independent generator for a key path.

    Args:
        root: The root seed.
        keys: The key path, for example ``("diffusion", "train")``.

    Returns:
        A seeded generator.
    """

    return np.random.default_rng(seed_sequence(root, *keys))
