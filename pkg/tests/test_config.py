import logging

import pytest

from cicreg.config import (
    VALID_KEYS,
    build_config,
    config_to_values,
    default_iters,
    fit_levels,
    load_config,
    parse_overrides,
    read_config_file,
    suggest_correction,
)
from cicreg.errors import ConfigError
from cicreg.optimizer import RegistrationConfig


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# registration settings\n"
        "\n"
        "levels = 2\n"
        "lambda_jac = 500   # softer folding penalty\n"
        "scale_weights = 0.5, 0.5\n"
        "step_size = 0.25\n"
    )
    return path


class TestReading:
    def test_comments_and_blank_lines(self, config_file):
        assert read_config_file(config_file) == {
            "levels": "2",
            "lambda_jac": "500",
            "scale_weights": "0.5, 0.5",
            "step_size": "0.25",
        }

    def test_later_keys_win(self, tmp_path):
        path = tmp_path / "dup.cfg"
        path.write_text("seed = 1\nseed = 2\n")
        assert read_config_file(path) == {"seed": "2"}

    def test_malformed_line_names_file_and_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("levels = 2\njust words\n")
        with pytest.raises(ConfigError, match="bad.cfg:2"):
            read_config_file(path)

    def test_overrides(self):
        assert parse_overrides(["lambda_jac=0", " seed = 7 "]) == {"lambda_jac": "0", "seed": "7"}

    def test_override_without_equals(self):
        with pytest.raises(ConfigError, match="--set"):
            parse_overrides(["lambda_jac"])


class TestBuildConfig:
    def test_empty_is_defaults(self):
        assert build_config({}) == RegistrationConfig()

    def test_values_reach_nested_models(self, config_file):
        cfg = build_config(read_config_file(config_file))
        assert cfg.levels == 2
        assert cfg.iters_per_level == [100, 50]
        assert cfg.weights.lambda_jac == 500.0
        assert cfg.ssim.scale_weights == [0.5, 0.5]
        assert cfg.step_size == 0.25

    def test_unknown_key_suggests(self):
        with pytest.raises(ConfigError, match="Did you mean 'lambda_smooth'"):
            build_config({"lambda_smoth": "1"})

    def test_invalid_value_is_a_config_error(self):
        with pytest.raises(ConfigError, match="step_size"):
            build_config({"step_size": "fast"})

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            build_config({"lambda_jac": "-1"})

    def test_mismatched_schedule(self):
        with pytest.raises(ConfigError, match="iters_per_level"):
            build_config({"levels": "2", "iters_per_level": "10,10,10"})

    def test_non_integer_levels(self):
        with pytest.raises(ConfigError, match="levels"):
            build_config({"levels": "two"})

    @pytest.mark.parametrize("word", ["auto", "None", ""])
    def test_num_scales_auto(self, word):
        assert build_config({"num_scales": word}).ssim.num_scales is None

    def test_flattened_config_rebuilds_identically(self):
        cfg = build_config({"levels": "2", "lambda_img_cyc": "0.5", "num_scales": "2", "seed": "3"})
        assert build_config(config_to_values(cfg)) == cfg

    def test_flattened_keys_are_the_valid_keys(self):
        assert tuple(config_to_values(RegistrationConfig())) == VALID_KEYS


class TestPrecedence:
    def test_file_then_set_then_flags(self, config_file):
        cfg = load_config(config_file, ["lambda_jac=250", "seed=5"], seed=9)
        assert cfg.weights.lambda_jac == 250.0
        assert cfg.seed == 9
        assert cfg.levels == 2

    def test_none_flags_are_ignored(self):
        assert load_config(None, (), seed=None).seed == 42


def test_default_iters():
    assert default_iters(3) == [100, 100, 50]
    assert default_iters(2) == [100, 50]
    assert default_iters(1) == [50]
    assert default_iters(4) == [100, 100, 100, 50]


class TestFitLevels:
    def test_small_volume_drops_coarse_levels(self, caplog):
        with caplog.at_level(logging.WARNING, logger="cicreg.config"):
            cfg = fit_levels(RegistrationConfig(), (16, 16, 16))
        assert cfg.levels == 2
        assert cfg.iters_per_level == [100, 50]
        assert "lowering levels from 3" in caplog.text

    def test_large_enough_volume_is_untouched(self):
        cfg = RegistrationConfig()
        assert fit_levels(cfg, (32, 32, 32)) is cfg

    def test_hopeless_volume_is_left_for_the_optimizer_to_reject(self):
        cfg = RegistrationConfig()
        assert fit_levels(cfg, (4, 4, 4)) is cfg


def test_suggest_correction():
    assert suggest_correction("levles", VALID_KEYS) == "Did you mean 'levels'?"
    assert suggest_correction("zzzz", VALID_KEYS) == ""
