import json

import pytest

from gmdg import config


def test_defaults_validate():
    assert config.validate("train", config.train_defaults())
    assert config.validate("adapt", config.adapt_defaults())


def test_overrides_and_files(tmp_path):
    p = tmp_path / "t.json"
    p.write_text(json.dumps({"batch_size": 8}))
    cfg = config.load_config("train", str(p), ["iterations=12", "augmentation.p=0.2", "modality=A"])
    assert (cfg["batch_size"], cfg["iterations"], cfg["modality"]) == (8, 12, "A")
    assert cfg["augmentation"] == {"p": 0.2}


@pytest.mark.parametrize("override", ["batch_size=0", "rho=3", "unknown_key=1", "profile=huge"])
def test_invalid_values_rejected(override):
    kind = "adapt" if override.startswith("rho") else "train"
    with pytest.raises(config.ConfigError):
        config.load_config(kind, overrides=[override])


def test_bad_files_and_syntax(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("[1, 2]")
    with pytest.raises(config.ConfigError):
        config.load_config("train", str(p))
    with pytest.raises(config.ConfigError):
        config.load_config("train", str(tmp_path / "missing.json"))
    with pytest.raises(config.ConfigError):
        config.parse_override("no-equals-sign")


def test_profiles():
    prof = config.profile("phantom-tiny")
    assert config.validate("experiment", prof)
    prof["seeds"] = []
    assert config.profile("phantom-tiny")["seeds"] == [0, 1, 2]
    with pytest.raises(config.ConfigError):
        config.profile("nope")


def test_hash_is_order_independent():
    assert config.config_hash({"a": 1, "b": 2}) == config.config_hash({"b": 2, "a": 1})
    assert config.config_hash({"a": 1}) != config.config_hash({"a": 2})
