import json

import pytest

from utils.config import RunConfig, parse_config, parse_config_dict
from utils.errors import ConfigError


def test_empty_config_gives_documented_defaults():
    config = parse_config()
    assert config.train.lr == 1e-4
    assert (config.train.beta1, config.train.beta2) == (0.9, 0.98)
    assert config.train.weight_decay == 0.01
    assert config.train.pool_size == 16 and config.train.k == 4
    assert config.loss.lambda_freq == 1.0 and config.loss.lambda_orth == 1.0
    assert config.train.warmup_epochs == 2 and config.train.epochs_stage1 == 5
    assert config.encoder.deep_prompting is True


def test_flag_overrides_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"train": {"pool_size": 16, "lr": 0.001}}))
    config = parse_config(path, {"train.pool_size": 8})
    assert config.train.pool_size == 8
    assert config.train.lr == 0.001


def test_k_beyond_pool_names_the_key():
    with pytest.raises(ConfigError, match="train.k") as info:
        parse_config(overrides={"train.k": 20})
    assert info.value.key == "train.k"
    assert info.value.exit_code == 2


def test_k_flag_carries_into_frequency_loss():
    config = parse_config(overrides={"train.k": 2})
    assert config.loss.k_freq == 2
    explicit = parse_config_dict({"loss": {"k_freq": 3}}, {"train.k": 2})
    assert explicit.loss.k_freq == 3


def test_unknown_keys_and_sections():
    with pytest.raises(ConfigError, match="train.learning_rate"):
        parse_config_dict({"train": {"learning_rate": 0.1}})
    with pytest.raises(ConfigError, match="optim"):
        parse_config_dict({"optim": {}})
    with pytest.raises(ConfigError, match="train.nope"):
        parse_config(overrides={"train.nope": 1})


def test_wrong_types():
    with pytest.raises(ConfigError, match="train.pool_size"):
        parse_config_dict({"train": {"pool_size": "16"}})
    with pytest.raises(ConfigError, match="encoder.deep_prompting"):
        parse_config_dict({"encoder": {"deep_prompting": 1}})
    with pytest.raises(ConfigError, match="train.k"):
        parse_config_dict({"train": {"k": True}})
    assert parse_config_dict({"train": {"lr": 1}}).train.lr == 1.0


def test_cross_section_constraints():
    with pytest.raises(ConfigError, match="benchmark.width"):
        parse_config_dict({"encoder": {"width": 16, "heads": 4}})
    with pytest.raises(ConfigError, match="train.warmup_epochs"):
        parse_config_dict({"train": {"warmup_epochs": 5}})
    with pytest.raises(ConfigError, match="train.variant"):
        parse_config(overrides={"train.variant": "three-stage"})
    with pytest.raises(ConfigError, match="train.verb_template"):
        parse_config(overrides={"train.verb_template": "a video"})


def test_missing_or_broken_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "absent.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{train: }")
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config(broken)


def test_dict_round_trip_and_updates():
    config = parse_config(overrides={"train.seed": 3, "loss.lambda_orth": 0.0})
    again = RunConfig.from_dict(json.loads(json.dumps(config.to_dict())))
    assert again == config
    updated = config.with_updates({"train.pool_size": 8, "encoder.deep_prompting": False})
    assert updated.train.pool_size == 8 and not updated.encoder.deep_prompting
    assert config.train.pool_size == 16
    with pytest.raises(ConfigError):
        config.with_updates({"train.k": 32})
