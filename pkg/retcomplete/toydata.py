"""Synthetic datasets for smoke tests and the training sanity check."""

from typing import List

import numpy as np

from retcomplete.palette import Palette
from retcomplete.rng import stream


def stripe_tokens(count: int = 16, side: int = 8, k: int = 8) -> np.ndarray:
    """
    Horizontal stripe token grids, [count, side, side].

    Image i starts at color i % k and advances one color every `width` rows,
    with width 1 or 2, so every row is predictable from its neighbours.
    """
    grids = np.zeros((count, side, side), dtype=np.int64)
    rows = np.arange(side)
    for i in range(count):
        offset = i % k
        width = 1 + (i // k) % 2
        grids[i] = ((offset + rows // width) % k)[:, None]
    return grids


def stripe_palette(k: int = 8) -> Palette:
    """k evenly spaced grey levels."""
    levels = np.linspace(0.0, 1.0, k)
    return Palette(np.stack([levels, levels, levels], axis=1))


def smooth_images(count: int, size: int, seed: int = 0) -> List[np.ndarray]:
    """
    Smooth RGB images in [0,1]: a random linear gradient plus one low-frequency wave.

    Args:
        count: Number of images
        size: Height and width
        seed: Seed of the generator
    """
    rng = stream(seed, "toydata")
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size), indexing="ij")
    images = []
    for _ in range(count):
        base = rng.uniform(0.2, 0.8, size=3)
        slope = rng.uniform(-0.3, 0.3, size=(2, 3))
        freq = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.0, 0.15, size=3)
        wave = np.sin(2.0 * np.pi * (freq[0] * yy + freq[1] * xx) + phase)
        img = base + slope[0] * yy[..., None] + slope[1] * xx[..., None] + amp * wave[..., None]
        images.append(np.clip(img, 0.0, 1.0))
    return images
