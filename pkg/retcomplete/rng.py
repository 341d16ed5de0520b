"""Named random streams derived from a single invocation seed."""

import hashlib

import numpy as np

STREAMS = ("palette", "masks", "init", "sampling", "batches", "toydata")


def stream_seed(seed: int, name: str) -> int:
    """Derive a 64-bit seed for the stream `name` from the invocation seed."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """
    Return an independent generator for a named stream.

    Extra integer keys (a step number, an image index) give further independent
    sub-streams without any shared state between them.
    """
    return np.random.default_rng([stream_seed(seed, name), *[int(k) for k in keys]])
