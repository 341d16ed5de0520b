"""Unit tests for the Bi-RetNet towers, fusion head and checkpoint packing."""

import numpy as np
import pytest

from retcomplete.biretnet import (
    PALETTE_ARRAY,
    ModelParams,
    backward_tower,
    expected_parameter_count,
    forward_tower,
    forward_tower_with_state,
    fuse_logits,
    fuse_predict,
    init_params,
    model_from_checkpoint,
    model_to_checkpoint,
    predict_logits,
    tower_step,
)
from retcomplete.checkpoint import Checkpoint
from retcomplete.config import ModelConfig, Paradigm
from retcomplete.errors import CheckpointError, DimensionError
from retcomplete.palette import Palette
from retcomplete.sequencer import PixelSequence, embed
from retcomplete.tensor_core import Tensor, flip

pytestmark = pytest.mark.unit


class TestParameters:
    def test_count_matches_formula(self, tiny_params, tiny_config):
        assert tiny_params.parameter_count() == expected_parameter_count(tiny_config)

    def test_hand_count(self):
        config = ModelConfig(heads=1, d_model=2, layers=1, side=1, palette_size=2, ffn_mult=1)
        embeddings = 3 * 2 + 1 * 2
        block = 4 * 2 + (3 * 4 + 2 * 2 + 2 * 4) + (4 + 2 + 4 + 2)
        head = 2 * 2 + 2 * 2 + 2
        assert init_params(config).parameter_count() == embeddings + 2 * block + head

    def test_names_are_stable(self, tiny_params):
        names = list(tiny_params.named_parameters())
        assert names[:2] == ["embed.fe", "embed.pe"]
        assert "fwd.1.msr.head1.w_v" in names
        assert "bwd.0.ffn.w2" in names
        assert names[-2:] == ["head.fc.weight", "head.fc.bias"]

    def test_init_is_seeded(self, tiny_config):
        a = init_params(tiny_config, seed=5).to_arrays()
        b = init_params(tiny_config, seed=5).to_arrays()
        c = init_params(tiny_config, seed=6).to_arrays()
        assert all(np.array_equal(a[n], b[n]) for n in a)
        assert not np.array_equal(a["embed.fe"], c["embed.fe"])

    def test_truncated_init(self, tiny_config):
        params = init_params(tiny_config, seed=1)
        bound = 2.0 * tiny_config.init_std
        assert np.abs(params.embedding.fe.data).max() <= bound
        np.testing.assert_array_equal(params.forward.layers[0].ln1_gamma.data, 1.0)
        np.testing.assert_array_equal(params.forward.layers[0].b1.data, 0.0)

    def test_clone_is_independent(self, tiny_params):
        copy = tiny_params.clone()
        copy.fc_bias.data += 1.0
        assert not np.array_equal(copy.fc_bias.data, tiny_params.fc_bias.data)

    def test_from_arrays_rejects_bad_shapes(self, tiny_params, tiny_config):
        arrays = tiny_params.to_arrays()
        arrays["head.fc.bias"] = np.zeros(3)
        with pytest.raises(CheckpointError, match="head.fc.bias"):
            ModelParams.from_arrays(tiny_config, arrays)
        del arrays["head.fc.bias"]
        with pytest.raises(CheckpointError, match="missing"):
            ModelParams.from_arrays(tiny_config, arrays)


class TestTowers:
    def test_shapes(self, tiny_params, make_sequence):
        seq = make_sequence(4, 8, seed=0)
        X = embed(seq, tiny_params.embedding)
        assert forward_tower(X, tiny_params.forward).shape == (16, 16)
        assert backward_tower(X, tiny_params.backward).shape == (16, 16)
        logits = predict_logits(seq, tiny_params)
        assert logits.shape == (16, 8)
        np.testing.assert_allclose(
            fuse_predict(Tensor(X.data), Tensor(X.data), tiny_params).data.sum(axis=1), 1.0
        )

    def test_zero_residual_blocks_are_identity(self, tiny_config, rng):
        params = init_params(tiny_config, seed=2, zero_residual=True)
        X = Tensor(rng.standard_normal((16, 16)))
        np.testing.assert_allclose(forward_tower(X, params.forward).data, X.data, atol=1e-12)

    def test_forward_tower_is_causal(self, tiny_params, rng):
        x = rng.standard_normal((16, 16))
        base = forward_tower(Tensor(x), tiny_params.forward).data
        x[10] += 1.0
        changed = forward_tower(Tensor(x), tiny_params.forward).data
        np.testing.assert_allclose(base[:10], changed[:10], atol=1e-12)
        assert not np.allclose(base[10:], changed[10:])

    def test_backward_tower_is_anticausal(self, tiny_params, rng):
        x = rng.standard_normal((16, 16))
        base = backward_tower(Tensor(x), tiny_params.backward).data
        x[5] += 1.0
        changed = backward_tower(Tensor(x), tiny_params.backward).data
        np.testing.assert_allclose(base[6:], changed[6:], atol=1e-12)
        assert not np.allclose(base[:6], changed[:6])

    def test_backward_is_flipped_forward(self, tiny_params, rng):
        X = Tensor(rng.standard_normal((16, 16)))
        expected = flip(forward_tower(flip(X, 0), tiny_params.backward), 0)
        np.testing.assert_allclose(backward_tower(X, tiny_params.backward).data, expected.data)

    @pytest.mark.parametrize(
        "paradigm,chunk", [(Paradigm.CHUNKWISE, 5), (Paradigm.RECURRENT, None)]
    )
    def test_paradigms_agree(self, tiny_params, make_sequence, paradigm, chunk):
        seq = make_sequence(4, 8, seed=1)
        expected = predict_logits(seq, tiny_params).data
        np.testing.assert_allclose(
            predict_logits(seq, tiny_params, paradigm, chunk).data, expected, atol=1e-6
        )

    def test_step_matches_parallel(self, tiny_params, rng):
        X = rng.standard_normal((16, 16))
        full = forward_tower(Tensor(X), tiny_params.forward).data
        states = tiny_params.forward.empty_states()
        for n in range(16):
            out, states = tower_step(Tensor(X[n]), tiny_params.forward, states)
            np.testing.assert_allclose(out.data, full[n], atol=1e-9)

    def test_stateful_prefix_then_steps(self, tiny_params, rng):
        X = rng.standard_normal((16, 16))
        full = forward_tower(Tensor(X), tiny_params.forward).data
        prefix, states = forward_tower_with_state(Tensor(X[:7]), tiny_params.forward)
        np.testing.assert_allclose(prefix.data, full[:7], atol=1e-9)
        out, _ = tower_step(Tensor(X[7]), tiny_params.forward, states)
        np.testing.assert_allclose(out.data, full[7], atol=1e-9)

    def test_rejects_wrong_width(self, tiny_params):
        with pytest.raises(DimensionError):
            forward_tower(Tensor(np.zeros((16, 12))), tiny_params.forward)

    def test_fusion_is_symmetric_in_towers(self, tiny_params, rng):
        Xf, Xb = rng.standard_normal((2, 16, 16))
        np.testing.assert_array_equal(
            fuse_predict(Tensor(Xf), Tensor(Xb), tiny_params).data,
            fuse_predict(Tensor(Xb), Tensor(Xf), tiny_params).data,
        )

    @pytest.mark.parametrize("neighbour", [3, 14])
    def test_prediction_sees_both_sides(self, tiny_params, make_sequence, neighbour):
        seq = make_sequence(4, 8, seed=2, ratio=0.0)
        target = int(seq.masked_positions()[0])
        tokens = seq.tokens.copy()
        tokens[neighbour] = (tokens[neighbour] + 1) % 8
        other = PixelSequence(tokens, seq.mask.copy(), seq.side)
        base = predict_logits(seq, tiny_params).data[target]
        changed = predict_logits(other, tiny_params).data[target]
        assert not np.allclose(base, changed, rtol=0.0, atol=1e-12)

    def test_fusion_rejects_mismatched_towers(self, tiny_params):
        with pytest.raises(DimensionError):
            fuse_logits(Tensor(np.zeros((4, 16))), Tensor(np.zeros((5, 16))), tiny_params)


class TestCheckpointPacking:
    def test_round_trip_with_palette(self, tiny_params, rng):
        palette = Palette(rng.random((8, 3)))
        checkpoint = Checkpoint.from_bytes(model_to_checkpoint(tiny_params, palette).to_bytes())
        params, restored = model_from_checkpoint(checkpoint)
        assert restored == palette
        assert params.config == tiny_params.config
        for name, value in tiny_params.to_arrays().items():
            np.testing.assert_array_equal(params.to_arrays()[name], value)

    def test_palette_size_must_match(self, tiny_params, rng):
        with pytest.raises(CheckpointError):
            model_to_checkpoint(tiny_params, Palette(rng.random((5, 3))))

    def test_digest_mismatch(self, tiny_params, rng):
        checkpoint = model_to_checkpoint(tiny_params, Palette(rng.random((8, 3))))
        checkpoint.arrays[PALETTE_ARRAY] = rng.random((8, 3))
        with pytest.raises(CheckpointError, match="digest"):
            model_from_checkpoint(checkpoint)

    def test_wrong_kind(self, tiny_params):
        checkpoint = model_to_checkpoint(tiny_params)
        checkpoint.kind = "upsampler"
        with pytest.raises(CheckpointError):
            model_from_checkpoint(checkpoint)
