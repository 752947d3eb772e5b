import logging
from dataclasses import dataclass

import pytest

from ipt_lab import config
from ipt_lab.config import ConfigError, build_dataclass, config_hash, log_level_from_env, read_config_file


@pytest.mark.parametrize("value,level", [("error", logging.ERROR), ("INFO", logging.INFO), (" debug ", logging.DEBUG)])
def test_log_levels(value, level):
    assert log_level_from_env({"IPT_LOG": value}) == level


def test_log_level_defaults_to_info():
    assert log_level_from_env({}) == logging.INFO


def test_unknown_log_level():
    with pytest.raises(ConfigError, match="allowed: error, info, debug"):
        log_level_from_env({"IPT_LOG": "verbose"})


def test_read_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text('{"seed": 3, "strategy": {"prompt_len": 7}}')
    assert read_config_file(str(path)) == {"seed": 3, "strategy": {"prompt_len": 7}}
    assert len(config_hash(str(path))) == 64


def test_read_toml(tmp_path):
    if config.tomllib is None:
        pytest.skip("no TOML parser installed")
    path = tmp_path / "run.toml"
    path.write_text('seed = 3\n\n[strategy]\nstrategy = "encoder-ipt"\nprompt_len = 7\n')
    assert read_config_file(str(path)) == {"seed": 3, "strategy": {"strategy": "encoder-ipt", "prompt_len": 7}}


def test_read_errors(tmp_path):
    with pytest.raises(ConfigError, match="config file not found"):
        read_config_file(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{seed: ")
    with pytest.raises(ConfigError, match="cannot parse config"):
        read_config_file(str(bad))
    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="must be an object"):
        read_config_file(str(listing))


@dataclass
class Sample:
    size: int = 1
    name: str = "x"

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("size must be >= 1")


def test_build_dataclass():
    assert build_dataclass(Sample, {"size": 4}, "sample") == Sample(4, "x")
    assert build_dataclass(Sample, None, "sample") == Sample()
    with pytest.raises(ConfigError, match="sample: unknown keys depth; allowed: size, name"):
        build_dataclass(Sample, {"depth": 2}, "sample")
    with pytest.raises(ConfigError, match="sample: size must be >= 1"):
        build_dataclass(Sample, {"size": 0}, "sample")
    with pytest.raises(ConfigError, match="expected an object"):
        build_dataclass(Sample, [1], "sample")
