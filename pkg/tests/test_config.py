"""Tests for config parsing, presets, and validation."""

import dataclasses

import pytest

from prototower import config
from prototower.config import TrainConfig
from prototower.errors import ConfigError


class TestParse:
    def test_defaults_survive_empty_text(self):
        assert config.parse_config("") == TrainConfig()

    def test_sets_typed_values(self):
        cfg = config.parse_config(
            "batch_size = 16\nlr_base = 0.005\nteacher_enabled = false\n"
        )
        assert cfg.batch_size == 16
        assert cfg.lr_base == 0.005
        assert cfg.teacher_enabled is False

    def test_comments_and_blanks_skipped(self):
        cfg = config.parse_config("# a comment\n\n  n_epoch = 3  \n")
        assert cfg.n_epoch == 3

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            config.parse_config("batch_sise = 16\n")

    def test_malformed_line_rejected(self):
        with pytest.raises(ConfigError, match="key = value"):
            config.parse_config("just some words\n")

    def test_bad_number_rejected(self):
        with pytest.raises(ConfigError):
            config.parse_config("batch_size = many\n")

    def test_bad_bool_rejected(self):
        with pytest.raises(ConfigError):
            config.parse_config("pbt_enabled = maybe\n")

    def test_base_overlay(self):
        base = dataclasses.replace(TrainConfig(), n_epoch=7)
        cfg = config.parse_config("batch_size = 8\n", base=base)
        assert cfg.n_epoch == 7
        assert cfg.batch_size == 8
        assert base.batch_size == TrainConfig().batch_size

    def test_round_trip_through_format(self):
        cfg = dataclasses.replace(
            TrainConfig(), lr_base=3e-4, pbt_enabled=False, episode_size=512
        )
        assert config.parse_config(config.format_config(cfg)) == cfg

    def test_format_mentions_every_field(self):
        text = config.format_config(TrainConfig())
        for field in dataclasses.fields(TrainConfig):
            assert f"{field.name} = " in text

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("n_classes = 4\n")
        assert config.load_config(path).n_classes == 4


class TestPresets:
    def test_full_changes_nothing(self):
        assert config.apply_preset(TrainConfig(), "full") == TrainConfig()

    def test_clip_only_disables_proto_and_teacher(self):
        cfg = config.apply_preset(TrainConfig(), "clip-only")
        assert cfg.proto_enabled is False
        assert cfg.teacher_enabled is False

    def test_no_pbt_flips_single_switch(self):
        cfg = config.apply_preset(TrainConfig(), "no-pbt")
        assert cfg.pbt_enabled is False
        assert dataclasses.replace(cfg, pbt_enabled=True) == TrainConfig()

    def test_no_augmentation_zeroes_sigma(self):
        assert config.apply_preset(TrainConfig(), "no-augmentation").sigma_augment == 0.0

    def test_unknown_preset_rejected(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            config.apply_preset(TrainConfig(), "no-such-arm")

    def test_all_presets_validate(self):
        for name in config.PRESETS:
            config.validate(config.apply_preset(TrainConfig(), name))


class TestSeedSpread:
    def test_streams_distinct(self):
        cfg = config.apply_seed(TrainConfig(), 1000)
        seeds = [
            cfg.seed_data, cfg.seed_teacher, cfg.seed_params,
            cfg.seed_train, cfg.seed_eval, cfg.seed_split, cfg.seed_gap,
        ]
        assert seeds == [1000, 1001, 1002, 1003, 1004, 1005, 1006]

    def test_negative_rejected(self):
        with pytest.raises(ConfigError):
            config.apply_seed(TrainConfig(), -1)


class TestValidate:
    def test_defaults_pass(self):
        config.validate(TrainConfig())

    @pytest.mark.parametrize(
        "field,value",
        [
            ("batch_size", 0),
            ("episode_size", 0),
            ("n_epoch", -1),
            ("lr_base", 0.0),
            ("tau_init", -0.07),
            ("tau_y", 0.0),
            ("weight_decay", -0.1),
            ("split_fraction", 0.0),
            ("split_fraction", 1.0),
            ("lock_image_fraction", 1.5),
            ("adam_beta1", 1.0),
            ("kmeans_iters", -1),
        ],
    )
    def test_bad_field_rejected(self, field, value):
        cfg = dataclasses.replace(TrainConfig(), **{field: value})
        with pytest.raises(ConfigError):
            config.validate(cfg)

    def test_teacher_wider_than_raw_rejected(self):
        cfg = dataclasses.replace(TrainConfig(), teacher_dim=65, teacher_raw_dim=64)
        with pytest.raises(ConfigError):
            config.validate(cfg)

    def test_teacher_without_pbt_needs_matching_width(self):
        cfg = dataclasses.replace(TrainConfig(), pbt_enabled=False, teacher_dim=8)
        with pytest.raises(ConfigError, match="teacher_dim"):
            config.validate(cfg)
        ok = dataclasses.replace(TrainConfig(), pbt_enabled=False, teacher_dim=16)
        config.validate(ok)
