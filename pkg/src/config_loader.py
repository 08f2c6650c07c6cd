"""
File: config_loader.py
Purpose: Load run configuration from YAML files and merge command-line overrides
Version: 2.0.0
Last Updated: 2026-10-16
"""
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import yaml

from src.config import DEFAULT_CONFIG_FILE
from src.exceptions import ConfigurationError

SECTIONS = ("model", "adapter", "data", "pretrain", "adapter_train", "evaluation", "application")


def load_yaml_config(config_path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """
    Load configuration from a YAML file.

    Args:
        config_path: Path to the YAML configuration file (defaults to config/give_defaults.yaml)

    Returns:
        Dict with configuration sections

    Raises:
        FileNotFoundError: If the configuration file doesn't exist
        yaml.YAMLError: If there's an error parsing the YAML
        ConfigurationError: If the file holds an unknown section or a nested section
    """
    config_file = Path(config_path) if config_path is not None else DEFAULT_CONFIG_FILE

    if not config_file.exists():
        raise FileNotFoundError(f"Configuration file not found: {config_file}")

    with open(config_file, "r", encoding="utf-8") as f:
        try:
            config = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise yaml.YAMLError(f"Error parsing YAML configuration {config_file}: {e}")

    if not isinstance(config, dict):
        raise ConfigurationError(f"{config_file}: top level must be a mapping of sections")
    for name, section in config.items():
        if name not in SECTIONS:
            raise ConfigurationError(f"{config_file}: unknown section {name!r} (expected one of {list(SECTIONS)})")
        if section is not None and not isinstance(section, dict):
            raise ConfigurationError(f"{config_file}: section {name!r} must hold key: value pairs")
        for key, value in (section or {}).items():
            if isinstance(value, dict):
                raise ConfigurationError(f"{config_file}: {name}.{key} is nested; sections are flat")
    return config


def get_section(config: Mapping[str, Any], name: str) -> Dict[str, Any]:
    """
    Get one section of a loaded configuration.

    Args:
        config: Configuration dictionary loaded from YAML
        name: Section name

    Returns:
        Copy of the section (empty if absent)
    """
    return dict(config.get(name) or {})


def apply_overrides(settings: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Flags win over file values; ``None`` means the flag was not given."""
    merged = dict(settings)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def parse_weights(text: str) -> Tuple[float, float, float]:
    """Parse ``--weights 1,1,0.5`` into a loss-weight triple."""
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 3:
        raise ConfigurationError(f"--weights needs three comma-separated values, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigurationError(f"--weights values must be numbers, got {text!r}") from None
