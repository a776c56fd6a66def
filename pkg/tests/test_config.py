"""
Tests for configuration management.
"""

import pytest

from lightdarts.config import RunConfig, load_config_file, parse_config_text, resolve_config
from lightdarts.exceptions import ConfigFileError
from lightdarts.supernet import DARTS_PRIMITIVES, LIGHT_PRIMITIVES


def test_config_defaults():
    """Test that config has the documented defaults."""
    config = RunConfig()
    assert config.epochs == 50
    assert config.lr == 1e-4
    assert config.arch_lr == 1e-4
    assert config.cells == 8
    assert config.order == "first"
    assert config.primitive_names == list(LIGHT_PRIMITIVES)


def test_config_environment_variable(monkeypatch):
    """Test that LIGHTDARTS_ environment variables override defaults."""
    monkeypatch.setenv("LIGHTDARTS_EPOCHS", "7")
    monkeypatch.setenv("LIGHTDARTS_LR", "0.002")

    test_config = RunConfig()
    assert test_config.epochs == 7
    assert test_config.lr == 0.002


def test_config_validation():
    """Test that out-of-range values are rejected."""
    with pytest.raises(ValueError):
        RunConfig(epochs=0)
    with pytest.raises(ValueError):
        RunConfig(lr=0.0)
    with pytest.raises(ValueError):
        RunConfig(batch_size=0)
    with pytest.raises(ValueError):
        RunConfig(init_channels=7)
    with pytest.raises(ValueError):
        RunConfig(order="third")


def test_config_log_level_validation():
    """Test that log levels are validated and upper-cased."""
    with pytest.raises(ValueError):
        RunConfig(log_level="INVALID")

    valid_config = RunConfig(log_level="debug")
    assert valid_config.log_level == "DEBUG"


def test_config_primitives_parsing():
    """Test presets, comma strings and lists of op names."""
    assert RunConfig(primitives="darts").primitive_names == list(DARTS_PRIMITIVES)

    test_config = RunConfig(primitives="skip_connect, zero")
    assert test_config.primitive_names == ["skip_connect", "zero"]

    test_config2 = RunConfig(primitives=["max_feature_map", "sep_conv_3x3"])
    assert test_config2.primitive_names == ["sep_conv_3x3", "max_feature_map"]

    with pytest.raises(ValueError):
        RunConfig(primitives="conv_7x7")
    with pytest.raises(ValueError):
        RunConfig(primitives="zero,zero")


def test_search_config_conversion():
    """Test that RunConfig hands its search fields to SearchConfig."""
    search = RunConfig(epochs=3, primitives="darts", unrolled_lr=0.0).search_config()
    assert search.epochs == 3
    assert search.primitives == list(DARTS_PRIMITIVES)
    assert search.xi == 0.0
    assert search.effective_retrain_epochs == 6


def test_parse_config_text():
    """Test key=value parsing with comments and blank lines."""
    values = parse_config_text("# run\n\nepochs = 3\nbatch-size=8\n")
    assert values == {"epochs": "3", "batch_size": "8"}


def test_parse_config_text_errors_carry_line_numbers():
    """Test that malformed lines are reported with their line number."""
    with pytest.raises(ConfigFileError) as exc_info:
        parse_config_text("epochs=3\nnot a pair\n")
    assert exc_info.value.line == 2

    with pytest.raises(ConfigFileError) as exc_info:
        parse_config_text("epochs=3\n\nepochs=4\n")
    assert exc_info.value.line == 3


def test_resolve_priority(tmp_path, monkeypatch):
    """Test flags > config file > environment > defaults."""
    monkeypatch.setenv("LIGHTDARTS_EPOCHS", "9")
    monkeypatch.setenv("LIGHTDARTS_CELLS", "5")
    path = tmp_path / "run.txt"
    path.write_text("epochs=4\nlr=0.01\n")

    config = resolve_config({"lr": 0.5, "seed": None}, load_config_file(path))
    assert config.lr == 0.5
    assert config.epochs == 4
    assert config.cells == 5
    assert config.seed == 0


def test_dump_round_trips_through_config_file(tmp_path):
    """Test that the provenance dump is a valid config file."""
    config = RunConfig(epochs=3, primitives="skip_connect,zero", seed=11)
    path = tmp_path / "search_run.txt"
    path.write_text(config.dump({"train_manifest": "data/train.tsv"}))

    values = load_config_file(path)
    assert values["train_manifest"] == "data/train.tsv"
    assert "unrolled_lr" not in values
    assert resolve_config({}, values) == config
    assert list(values) == sorted(values)
