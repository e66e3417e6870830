"""
Experiment configuration from key=value files.

    PRESET=high_contrast
    GRID__REFINE=8
    ESTIMATOR__KIND=sc

Keys are upper case with `__` between nested fields. `PRESET` selects the
starting config and the remaining keys override it, followed by `STOMSFEM_<KEY>`
environment variables and finally explicit overrides (the CLI's --set).
"""
import logging
import os
from typing import Any, Dict, Mapping, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from .exceptions import ConfigError
from .models import ExperimentConfig
from .presets import get_preset

load_dotenv()

logger = logging.getLogger(__name__)

ENV_PREFIX = "STOMSFEM_"
_TOP_LEVEL_ENV = {"ARTIFACT_DIR", "OUTPUT_DIR", "WORKERS"}


def _normalize(key: str) -> str:
    return key.strip().upper().replace(".", "__")


def _parse_value(raw: str) -> Any:
    """Tuples are comma separated; everything else is left for pydantic to coerce."""
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if "," in raw:
        return [part.strip() for part in raw.split(",")]
    return raw


def _set_nested(target: Dict[str, Any], key: str, value: Any):
    parts = [p.lower() for p in key.split("__")]
    node = target
    for depth, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {key}")
        if depth == len(parts) - 1:
            node[part] = value
        else:
            node = node[part]


def environment_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):]
        if key in _TOP_LEVEL_ENV or "__" in key or key == "PRESET":
            out[key] = value
    return out


def build_config(entries: Mapping[str, Optional[str]]) -> ExperimentConfig:
    """Applies upper-case key=value entries on top of the preset named by PRESET."""
    entries = {_normalize(k): v for k, v in entries.items()}
    preset = entries.pop("PRESET", None) or "custom"
    base = get_preset(preset).model_dump()
    for key, raw in entries.items():
        if raw is None:
            continue
        _set_nested(base, key, _parse_value(raw))
    try:
        return ExperimentConfig.model_validate(base)
    except ValidationError as e:
        first = e.errors()[0]
        location = "__".join(str(part) for part in first.get("loc", ())).upper()
        raise ConfigError(f"invalid config value for {location or 'config'}: {first.get('msg')}") from e


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None,
                environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    entries: Dict[str, Optional[str]] = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        entries.update({_normalize(k): v for k, v in dotenv_values(path).items()})
    entries.update({_normalize(k): v for k, v in environment_overrides(environ).items()})
    entries.update({_normalize(k): v for k, v in (overrides or {}).items()})
    config = build_config(entries)
    logger.debug("loaded config '%s' from %s", config.name, path or "defaults")
    return config


def parse_assignments(items) -> Dict[str, str]:
    """`KEY=VALUE` strings into a dict; raises ConfigError on malformed items."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"expected KEY=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        out[_normalize(key)] = value
    return out
