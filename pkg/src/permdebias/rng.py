"""Named random substreams derived from a single 64-bit run seed."""

import hashlib

import numpy as np


def _word(name) -> int:
    digest = hashlib.blake2b(str(name).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, *names) -> np.random.Generator:
    """Generator for the stream identified by ``names`` under ``seed``.

    The same (seed, names) pair always yields the same sequence, independent
    of how many other streams were created before it.
    """
    if seed is None:
        raise ValueError("a seed is required")
    ss = np.random.SeedSequence(int(seed) % 2**64, spawn_key=tuple(_word(n) for n in names))
    return np.random.default_rng(ss)


def derive_seed(seed: int, *names) -> int:
    """A 63-bit integer seed for the named stream, for APIs that take ints."""
    state = np.random.SeedSequence(int(seed) % 2**64, spawn_key=tuple(_word(n) for n in names)).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
