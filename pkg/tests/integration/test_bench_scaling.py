"""Per-pixel cost: constant for the recurrent decoder, growing for full recompute."""

import pytest

from retcomplete.bench import run_bench
from retcomplete.config import BenchConfig, ModelConfig

pytestmark = [pytest.mark.integration, pytest.mark.slow]


def test_recurrent_step_cost_is_flat_and_recompute_grows():
    cfg = BenchConfig(
        model=ModelConfig(heads=4, d_model=64, layers=4, side=32, palette_size=32),
        ratios=[0.25, 0.75],
        reps=5,
        warmup=1,
        seed=0,
    )
    run = run_bench(cfg)
    recurrent = run.result("recurrent", 0.75).median_ms / run.result("recurrent", 0.25).median_ms
    recompute = run.result("recompute", 0.75).median_ms / run.result("recompute", 0.25).median_ms
    assert recurrent < 1.3
    assert recompute >= 2.0
