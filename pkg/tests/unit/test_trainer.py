"""Unit tests for the masked-pixel training loop."""

import csv
import math

import numpy as np
import pytest

from retcomplete.biretnet import init_params, model_from_checkpoint
from retcomplete.checkpoint import load_checkpoint
from retcomplete.config import TrainConfig
from retcomplete.errors import CheckpointError, TrainingError, UsageError
from retcomplete.tensor_core import Tensor
from retcomplete.toydata import stripe_palette, stripe_tokens
from retcomplete.trainer import (
    METRICS_COLUMNS,
    build_token_dataset,
    make_optimizer,
    masked_accuracy,
    mlm_loss,
    sample_batch,
    train_loop,
    train_step,
)

pytestmark = pytest.mark.unit


class TestLoss:
    def test_uniform_distribution_costs_log_k(self):
        probs = Tensor(np.full((4, 8), 1.0 / 8))
        loss = mlm_loss(probs, np.zeros(4, dtype=int), np.array([1, 0, 1, 1]), logits=False)
        assert float(loss.data) == pytest.approx(math.log(8))

    def test_only_masked_positions_count(self):
        logits = np.zeros((3, 2))
        logits[0] = [10.0, -10.0]
        a = mlm_loss(Tensor(logits), np.array([1, 0, 0]), np.array([0, 1, 1]))
        assert float(a.data) == pytest.approx(math.log(2))

    def test_confident_correct_prediction_costs_nothing(self):
        probs = Tensor(np.full((3, 3), 1e-9) + np.eye(3) * (1.0 - 2e-9))
        loss = mlm_loss(probs, np.arange(3), np.ones(3), logits=False)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-8)

    def test_requires_a_masked_position(self):
        with pytest.raises(UsageError):
            mlm_loss(Tensor(np.zeros((2, 2))), np.zeros(2, dtype=int), np.zeros(2))

    def test_accuracy(self):
        logits = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        assert masked_accuracy(logits, np.array([0, 0, 0]), np.array([1, 1, 0])) == (1, 2)


class TestBatches:
    def test_batch_depends_on_seed_and_step_only(self):
        dataset = stripe_tokens(8, side=6, k=4)
        cfg = TrainConfig(batch_size=3, seed=2)
        a, b = sample_batch(dataset, cfg, 5), sample_batch(dataset, cfg, 5)
        c = sample_batch(dataset, cfg, 6)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.mask, y.mask)
            np.testing.assert_array_equal(x.tokens, y.tokens)
        assert any(not np.array_equal(x.mask, y.mask) for x, y in zip(a, c))

    def test_every_sample_has_a_masked_pixel(self):
        dataset = stripe_tokens(4, side=4, k=4)
        cfg = TrainConfig(batch_size=4, mask_ratio_min=0.05, mask_ratio_max=0.1)
        for step in range(20):
            assert all(seq.n_masked >= 1 for seq in sample_batch(dataset, cfg, step))

    def test_build_token_dataset(self):
        palette = stripe_palette(4)
        images = [np.full((8, 8, 3), level) for level in palette.centroids[:, 0]]
        grids = build_token_dataset(images, palette, side=4)
        assert grids.shape == (4, 4, 4)
        np.testing.assert_array_equal(grids[:, 0, 0], [0, 1, 2, 3])
        with pytest.raises(UsageError):
            build_token_dataset([], palette, side=4)


class TestStep:
    def test_zero_learning_rate_keeps_parameters(self, tiny_config, make_sequence):
        params = init_params(tiny_config, seed=1)
        before = params.to_arrays()
        cfg = TrainConfig(lr=0.0)
        optimizer = make_optimizer(params, cfg)
        _, metrics = train_step(
            [make_sequence(4, 8, seed=s) for s in range(2)], params, optimizer, cfg
        )
        assert metrics.step == 1
        assert metrics.grad_norm > 0.0
        for name, value in params.to_arrays().items():
            np.testing.assert_array_equal(value, before[name])

    def test_loss_decreases_on_repeated_batch(self, tiny_config, make_sequence):
        params = init_params(tiny_config, seed=1)
        cfg = TrainConfig(lr=0.01)
        optimizer = make_optimizer(params, cfg)
        batch = [make_sequence(4, 8, seed=s) for s in range(2)]
        losses = [train_step(batch, params, optimizer, cfg)[1].mlm_loss for _ in range(15)]
        assert losses[-1] < losses[0]

    def test_non_finite_loss(self, tiny_config, make_sequence):
        params = init_params(tiny_config, seed=1)
        params.fc_bias.data[:] = np.nan
        cfg = TrainConfig()
        with pytest.raises(TrainingError) as info:
            train_step([make_sequence(4, 8, seed=0)], params, make_optimizer(params, cfg), cfg)
        assert "sample_losses" in info.value.diagnostics

    def test_empty_batch(self, tiny_params):
        cfg = TrainConfig()
        with pytest.raises(UsageError):
            train_step([], tiny_params, make_optimizer(tiny_params, cfg), cfg)


class TestLoop:
    def test_writes_checkpoints_and_metrics(self, tmp_path, tiny_config):
        dataset = stripe_tokens(8, side=4, k=8)
        palette = stripe_palette(8)
        cfg = TrainConfig(steps=4, batch_size=2, checkpoint_every=2)
        final = train_loop(dataset, cfg, tiny_config, tmp_path, palette=palette)
        assert final == tmp_path / "final.rckpt"
        assert (tmp_path / "step_000002.rckpt").exists()
        with (tmp_path / "metrics.csv").open() as handle:
            rows = list(csv.reader(handle))
        assert tuple(rows[0]) == METRICS_COLUMNS
        assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4]
        params, stored = model_from_checkpoint(load_checkpoint(final))
        assert stored == palette
        assert load_checkpoint(final).meta["step"] == 4

    def test_resume_matches_uninterrupted_run(self, tmp_path, tiny_config):
        dataset = stripe_tokens(8, side=4, k=8)
        full = train_loop(
            dataset, TrainConfig(steps=4, batch_size=2), tiny_config, tmp_path / "full"
        )
        half = train_loop(
            dataset, TrainConfig(steps=2, batch_size=2), tiny_config, tmp_path / "half"
        )
        cfg = TrainConfig(steps=4, batch_size=2)
        resumed = train_loop(dataset, cfg, tiny_config, tmp_path / "res", resume=half)
        a = model_from_checkpoint(load_checkpoint(full))[0].to_arrays()
        b = model_from_checkpoint(load_checkpoint(resumed))[0].to_arrays()
        for name in a:
            np.testing.assert_allclose(b[name], a[name], atol=1e-12)

    def test_fresh_run_restarts_metrics(self, tmp_path, tiny_config):
        dataset = stripe_tokens(4, side=4, k=8)

        def logged_steps():
            with (tmp_path / "metrics.csv").open() as handle:
                return [int(row["step"]) for row in csv.DictReader(handle)]

        train_loop(dataset, TrainConfig(steps=3, batch_size=1), tiny_config, tmp_path)
        half = train_loop(dataset, TrainConfig(steps=2, batch_size=1), tiny_config, tmp_path)
        assert logged_steps() == [1, 2]
        cfg = TrainConfig(steps=4, batch_size=1)
        train_loop(dataset, cfg, tiny_config, tmp_path, resume=half)
        assert logged_steps() == [1, 2, 3, 4]

    def test_rejects_mismatched_dataset(self, tmp_path, tiny_config):
        with pytest.raises(UsageError):
            train_loop(stripe_tokens(2, side=5, k=8), TrainConfig(steps=1), tiny_config, tmp_path)
        with pytest.raises(UsageError):
            train_loop(np.full((2, 4, 4), 9), TrainConfig(steps=1), tiny_config, tmp_path)

    def test_resume_rejects_other_config(self, tmp_path, tiny_config):
        dataset = stripe_tokens(4, side=4, k=8)
        ckpt = train_loop(dataset, TrainConfig(steps=1, batch_size=1), tiny_config, tmp_path / "a")
        other = tiny_config.model_copy(update={"layers": 1})
        with pytest.raises(CheckpointError, match="different model config"):
            train_loop(
                dataset, TrainConfig(steps=2, batch_size=1), other, tmp_path / "b", resume=ckpt
            )

    def test_palette_is_optional(self, tmp_path, tiny_config):
        dataset = stripe_tokens(2, side=4, k=8)
        final = train_loop(dataset, TrainConfig(steps=1, batch_size=1), tiny_config, tmp_path)
        assert model_from_checkpoint(load_checkpoint(final))[1] is None
