"""
Experiment config files.
Sectioned key-value text read with configparser and validated by the
ExperimentConfig schema; unknown sections and keys are errors.
"""

import configparser
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import ValidationError

from ..core.errors import ConfigError
from ..core.settings import Tolerances, override_tolerances
from ..models.schemas import ExperimentConfig

logger = logging.getLogger(__name__)

NESTED_SECTIONS = ("signal", "support", "outliers", "engine", "l1", "init")
SECTIONS = ("experiment",) + NESTED_SECTIONS + ("tolerances",)


def parse_config_text(text: str, source: str = "<string>") -> Dict[str, Any]:
    """Raw nested dict from config text; values stay strings for pydantic to coerce"""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e

    unknown = [name for name in parser.sections() if name not in SECTIONS]
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {', '.join(unknown)}; expected {', '.join(SECTIONS)}")

    data: Dict[str, Any] = {}
    if parser.has_section("experiment"):
        data.update(parser["experiment"])
    for name in NESTED_SECTIONS:
        if parser.has_section(name):
            data[name] = dict(parser[name])
    if parser.has_section("tolerances"):
        data["tolerances"] = dict(parser["tolerances"])
    return data


def build_config(data: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None, source: str = "<config>") -> ExperimentConfig:
    """
    Validate a raw config dict.

    Args:
        data: Nested dict as produced by parse_config_text
        overrides: Top-level experiment fields that win over the file (None values are ignored)
        source: Name used in error messages

    Returns:
        ExperimentConfig
    """
    data = dict(data)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value

    tolerances = data.get("tolerances", {})
    unknown = [key for key in tolerances if key not in Tolerances.model_fields]
    if unknown:
        raise ConfigError(f"{source}: unknown tolerance(s) {', '.join(unknown)}")
    try:
        data["tolerances"] = {key: float(value) for key, value in tolerances.items()}
    except ValueError as e:
        raise ConfigError(f"{source}: tolerances must be numbers ({e})") from e

    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{source}: {e}") from e


def load_experiment_config(
    path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None
) -> ExperimentConfig:
    """Read and validate an experiment config file"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    cfg = build_config(parse_config_text(text, str(path)), overrides, str(path))
    logger.debug(f"Loaded config {path}: mode={cfg.mode}, trials={cfg.trials}")
    return cfg


def apply_tolerances(cfg: ExperimentConfig) -> Tolerances:
    """Install the [tolerances] overrides for this process"""
    values = dict(cfg.tolerances)
    for key in ("enumeration_budget", "exact_kappa_max_n"):
        if key in values:
            values[key] = int(values[key])
    return override_tolerances(**values)
