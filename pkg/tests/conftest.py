"""Shared fixtures."""

from typing import Callable, Iterator

import numpy as np
import pytest

from retcomplete.biretnet import ModelParams, init_params
from retcomplete.config import ModelConfig
from retcomplete.log import configure_logging
from retcomplete.sequencer import PixelSequence
from retcomplete.tensor_core import set_debug, set_precision


@pytest.fixture(autouse=True)
def float64() -> Iterator[None]:
    """Every test runs in 64-bit precision with quiet logging."""
    set_precision(64)
    set_debug(False)
    configure_logging("ERROR")
    yield
    set_precision(64)
    set_debug(False)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(heads=2, d_model=16, layers=2, side=4, palette_size=8)


@pytest.fixture
def tiny_params(tiny_config: ModelConfig) -> ModelParams:
    return init_params(tiny_config, seed=7)


@pytest.fixture
def small_config() -> ModelConfig:
    return ModelConfig(heads=2, d_model=16, layers=2, side=8, palette_size=8)


@pytest.fixture
def small_params(small_config: ModelConfig) -> ModelParams:
    return init_params(small_config, seed=3)


def _random_sequence(side: int, k: int, seed: int, ratio: float = 0.4) -> PixelSequence:
    gen = np.random.default_rng(seed)
    tokens = gen.integers(0, k, size=(side, side))
    mask = (gen.random((side, side)) < ratio).astype(np.uint8)
    if not mask.any():
        mask[side // 2, side // 2] = 1
    return PixelSequence.from_grids(tokens, mask)


@pytest.fixture
def make_sequence() -> Callable[..., PixelSequence]:
    """Random tokens with a random mask; at least one pixel is masked."""
    return _random_sequence
