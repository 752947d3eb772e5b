"""Config files, the config error type and the log level switch."""

import hashlib
import json
import logging
import os
from typing import Any, Dict, Iterable

# Try to import tomllib (Python 3.11+), fallback to tomli for older versions
try:
    import tomllib
except ImportError:
    try:
        import tomli as tomllib
    except ImportError:
        tomllib = None

log = logging.getLogger("ipt-lab")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class ConfigError(ValueError):
    """Invalid configuration; the CLI exits with code 2."""


def allowed(what: str, value: Any, choices: Iterable[str]) -> ConfigError:
    return ConfigError(f"unknown {what} {value!r}; allowed: {', '.join(choices)}")


def log_level_from_env(env: Dict[str, str] = None) -> int:
    env = os.environ if env is None else env
    name = env.get("IPT_LOG", "info").strip().lower()
    if name not in LOG_LEVELS:
        raise allowed("IPT_LOG level", name, LOG_LEVELS)
    return LOG_LEVELS[name]


def read_config_file(path: str) -> Dict[str, Any]:
    """Parse a JSON or TOML run config into a plain dict."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.endswith(".toml"):
            if tomllib is None:
                raise ConfigError("tomllib/tomli not available, cannot read a TOML config")
            with open(path, "rb") as f:
                data = tomllib.load(f)
        else:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
    except ConfigError:
        raise
    except Exception as e:
        raise ConfigError(f"{path}: cannot parse config: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be an object at the top level")
    return data


def config_hash(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def build_dataclass(cls, data: Dict[str, Any], where: str):
    """Instantiate ``cls`` from ``data``, turning unknown keys and bad values into ConfigError."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = getattr(cls, "__dataclass_fields__", {})
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {', '.join(unknown)}; allowed: {', '.join(fields)}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e
