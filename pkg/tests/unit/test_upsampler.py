"""Unit tests for bilinear upscaling and the guided refinement network."""

import numpy as np
import pytest

from retcomplete.checkpoint import Checkpoint
from retcomplete.config import UpsamplerConfig, UpsamplerTrainConfig
from retcomplete.errors import CheckpointError, DimensionError, UsageError
from retcomplete.toydata import smooth_images, stripe_palette
from retcomplete.upsampler import (
    UpsampleExample,
    UpsamplerParams,
    bilinear_upscale,
    composite,
    init_upsampler,
    l1_loss,
    masked_l1,
    refine,
    train_upsampler,
)

pytestmark = pytest.mark.unit

TINY = UpsamplerConfig(widths=(4, 6), residual_blocks=1)


class TestBilinear:
    def test_constant_image(self):
        out = bilinear_upscale(np.full((3, 3, 3), 0.3), 12, 12)
        assert out.shape == (12, 12, 3)
        np.testing.assert_allclose(out, 0.3)

    def test_centre_of_two_by_two(self):
        img = np.array([[0.0, 1.0], [1.0, 0.0]])[..., None].repeat(3, axis=2)
        out = bilinear_upscale(img, 3, 3)
        np.testing.assert_allclose(out[1, 1], 0.5)
        np.testing.assert_allclose(out[0, 1], 0.5)
        np.testing.assert_allclose(out[[0, 0, 2, 2], [0, 2, 0, 2], 0], [0.0, 1.0, 1.0, 0.0])

    def test_matches_formula(self, rng):
        img = rng.random((3, 4, 3))
        out = bilinear_upscale(img, 7, 10)
        for Y in range(7):
            for X in range(10):
                y, x = Y * 2 / 6, X * 3 / 9
                y0, x0 = min(int(y), 1), min(int(x), 2)
                fy, fx = y - y0, x - x0
                expected = (
                    img[y0, x0] * (1 - fy) * (1 - fx)
                    + img[y0 + 1, x0] * fy * (1 - fx)
                    + img[y0, x0 + 1] * (1 - fy) * fx
                    + img[y0 + 1, x0 + 1] * fy * fx
                )
                np.testing.assert_allclose(out[Y, X], expected, atol=1e-12)

    def test_refuses_to_shrink(self):
        with pytest.raises(UsageError):
            bilinear_upscale(np.zeros((4, 4, 3)), 2, 8)


def scene(rng: np.random.Generator, size: int = 16):
    original = rng.random((size, size, 3))
    upscaled = bilinear_upscale(rng.random((4, 4, 3)), size, size)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[4:12, 2:10] = 1
    return upscaled, original, mask


class TestRefine:
    def test_zero_head_is_bilinear_composite(self, rng):
        upscaled, original, mask = scene(rng)
        out = refine(upscaled, original, mask, init_upsampler(TINY, seed=0))
        np.testing.assert_allclose(out, composite(upscaled, original, mask), atol=1e-12)

    def test_known_pixels_are_exact(self, rng):
        upscaled, original, mask = scene(rng)
        params = init_upsampler(TINY, seed=0)
        params["head.weight"].data[:] = rng.standard_normal(params["head.weight"].shape)
        out = refine(upscaled, original, mask, params)
        np.testing.assert_array_equal(out[mask == 0], original[mask == 0])
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_empty_mask_returns_original(self, rng):
        upscaled, original, _ = scene(rng)
        out = refine(upscaled, original, np.zeros((16, 16), dtype=np.uint8), init_upsampler(TINY))
        np.testing.assert_array_equal(out, original)

    def test_odd_sizes_are_padded_and_cropped(self, rng):
        upscaled, original, mask = scene(rng, size=30)
        params = init_upsampler(TINY, seed=0)
        out = refine(upscaled, original, mask, params)
        assert out.shape == (30, 30, 3)
        np.testing.assert_allclose(out, composite(upscaled, original, mask), atol=1e-12)
        params["head.weight"].data[:] = rng.standard_normal(params["head.weight"].shape)
        out = refine(upscaled[:, :21], original[:, :21], mask[:, :21], params)
        assert out.shape == (30, 21, 3)
        np.testing.assert_array_equal(out[mask[:, :21] == 0], original[:, :21][mask[:, :21] == 0])

    def test_input_checks(self, rng):
        upscaled, original, mask = scene(rng)
        params = init_upsampler(TINY)
        with pytest.raises(DimensionError):
            refine(upscaled[:14], original, mask, params)
        with pytest.raises(DimensionError):
            refine(upscaled, original, mask[:8], params)
        with pytest.raises(UsageError):
            refine(upscaled, original, mask * 2, params)


class TestParams:
    def test_checkpoint_round_trip(self):
        params = init_upsampler(TINY, seed=4)
        restored = UpsamplerParams.from_checkpoint(
            Checkpoint.from_bytes(params.to_checkpoint().to_bytes())
        )
        assert restored.config == TINY
        for name, value in params.to_arrays().items():
            np.testing.assert_array_equal(restored.to_arrays()[name], value)

    def test_wrong_kind(self):
        checkpoint = init_upsampler(TINY).to_checkpoint()
        checkpoint.kind = "biretnet"
        with pytest.raises(CheckpointError):
            UpsamplerParams.from_checkpoint(checkpoint)

    def test_missing_array(self):
        arrays = init_upsampler(TINY).to_arrays()
        del arrays["dec2.bias"]
        with pytest.raises(CheckpointError, match="dec2.bias"):
            UpsamplerParams.from_arrays(TINY, arrays)

    def test_residual_layout(self):
        names = list(
            init_upsampler(UpsamplerConfig(widths=(4, 6), residual_blocks=2)).named_parameters()
        )
        assert "res1.norm2.beta" in names
        assert "res2.conv1.weight" not in names


class TestTraining:
    def examples(self):
        images = smooth_images(3, 16, seed=1)
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[4:12, 4:12] = 1
        return [UpsampleExample.simulate(img, 4, mask, stripe_palette(8)) for img in images]

    def test_masked_l1(self):
        a, b = np.zeros((2, 2, 3)), np.ones((2, 2, 3))
        mask = np.array([[1, 0], [0, 0]])
        assert masked_l1(a, b * 0.5, mask) == pytest.approx(0.5)
        assert masked_l1(a, b, np.zeros((2, 2))) == pytest.approx(1.0)

    def test_loss_at_init_is_bilinear_error(self):
        example = self.examples()[0]
        loss = float(l1_loss(example, init_upsampler(TINY)).data)
        assert loss == pytest.approx(masked_l1(example.upscaled, example.target, example.mask))

    def test_zero_learning_rate_leaves_params(self):
        start = init_upsampler(TINY, seed=2)
        before = start.to_arrays()
        params = train_upsampler(self.examples(), UpsamplerTrainConfig(steps=2, lr=0.0), init=start)
        for name, value in params.to_arrays().items():
            np.testing.assert_array_equal(value, before[name])

    def test_training_lowers_loss(self):
        examples = self.examples()
        start = init_upsampler(TINY, seed=2)
        before = np.mean([float(l1_loss(e, start).data) for e in examples])
        params = train_upsampler(
            examples, UpsamplerTrainConfig(steps=30, lr=5e-3, batch_size=3), config=TINY
        )
        after = np.mean([float(l1_loss(e, params).data) for e in examples])
        assert after < before

    def test_empty_dataset(self):
        with pytest.raises(UsageError):
            train_upsampler([], UpsamplerTrainConfig())
