"""Unit tests for configuration models and the config file format."""

import pytest
from pydantic import ValidationError

from retcomplete.config import (
    BenchConfig,
    MaskKind,
    MaskSpec,
    ModelConfig,
    Paradigm,
    PipelineConfig,
    SamplingMode,
    SamplingPolicy,
    TrainConfig,
    UpsamplerConfig,
    parse_config,
    parse_config_text,
    save_config,
    serialize_config,
)
from retcomplete.errors import ConfigError, UsageError

pytestmark = pytest.mark.unit


class TestModels:
    def test_model_derived_sizes(self):
        config = ModelConfig(heads=4, d_model=32, side=6)
        assert config.d_head == 8
        assert config.seq_len == 36

    def test_heads_must_divide_width(self):
        with pytest.raises(ValidationError, match="divisible"):
            ModelConfig(heads=3, d_model=16)

    def test_presets(self):
        assert ModelConfig.celeba_scale().side == 48
        assert ModelConfig.imagenet_scale().d_model == 1024
        assert ModelConfig.desk() == ModelConfig()

    def test_zero_lr_allowed(self):
        assert TrainConfig(lr=0.0).lr == 0.0

    def test_training_rejects_recurrent(self):
        with pytest.raises(ValidationError):
            TrainConfig(paradigm=Paradigm.RECURRENT)

    def test_ratio_range_ordered(self):
        with pytest.raises(ValidationError):
            TrainConfig(mask_ratio_min=0.6, mask_ratio_max=0.3)

    @pytest.mark.parametrize("ratio", [0.0, 1.0, -0.2])
    def test_mask_ratio_bounds(self, ratio):
        with pytest.raises(ValidationError):
            MaskSpec(ratio=ratio)

    def test_bench_ratios_from_text(self):
        assert BenchConfig(ratios="0.1, 0.5").ratios == [0.1, 0.5]
        with pytest.raises(ValidationError):
            BenchConfig(ratios=[1.0])
        with pytest.raises(ValidationError):
            BenchConfig(ratios=[])
        with pytest.raises(ValidationError):
            BenchConfig(reps=4)

    def test_upsampler_widths_from_text(self):
        assert UpsamplerConfig(widths="8,16").widths == (8, 16)


class TestSamplingPolicy:
    def test_top1(self):
        policy = SamplingPolicy.parse("top1", seed=3)
        assert policy.mode == SamplingMode.TOP1
        assert policy.seed == 3
        assert str(policy) == "top1"

    def test_topk(self):
        policy = SamplingPolicy.parse("topk:5:0.7")
        assert (policy.mode, policy.top_k, policy.temperature) == (SamplingMode.TOPK, 5, 0.7)
        assert str(policy) == "topk:5:0.7"

    @pytest.mark.parametrize("text", ["top2", "topk:5", "topk:x:1.0", "topk:3:0"])
    def test_invalid(self, text):
        with pytest.raises((UsageError, ValidationError)):
            SamplingPolicy.parse(text)


class TestConfigFile:
    def test_defaults_round_trip(self):
        config = PipelineConfig()
        assert parse_config_text(serialize_config(config)) == config

    def test_custom_round_trip(self, tmp_path):
        config = PipelineConfig(
            seed=11,
            precision=32,
            model=ModelConfig(heads=2, d_model=8, layers=1, side=4, palette_size=6),
            mask=MaskSpec(kind=MaskKind.WIDE, ratio=0.25, brush=2),
            policy=SamplingPolicy.parse("topk:3:0.5"),
            bench=BenchConfig(ratios=[0.0, 0.3], reps=5),
        )
        path = save_config(config, tmp_path / "run.cfg")
        assert parse_config(path) == config

    def test_single_ratio_round_trip(self):
        config = PipelineConfig(bench=BenchConfig(ratios=[0.5]))
        assert parse_config_text(serialize_config(config)).bench.ratios == [0.5]

    def test_dotted_keys_and_comments(self):
        text = "# a run\nmodel.heads = 2\nmodel.d_model = 8\ntrain.lr = 0.001\nmask.kind = half\n"
        config = parse_config_text(text)
        assert config.model.heads == 2
        assert config.train.lr == 0.001
        assert config.mask.kind == MaskKind.HALF.value

    def test_unknown_key(self):
        with pytest.raises(ValidationError):
            parse_config_text("model.colour = 3\n")

    def test_invalid_value(self):
        with pytest.raises(ValidationError):
            parse_config_text("precision = 16\n")

    def test_scalar_conflict(self):
        with pytest.raises(ConfigError):
            parse_config_text("model = 3\nmodel.heads = 2\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "none.cfg")

    def test_check_paths(self, tmp_path):
        config = parse_config_text(
            f"paths.data = {tmp_path / 'missing'}\npaths.out = {tmp_path / 'o'}\n"
        )
        with pytest.raises(ConfigError, match="paths.data"):
            config.check_paths()
        parse_config_text(f"paths.data = {tmp_path}\n").check_paths()
