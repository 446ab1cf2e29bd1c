"""
Configuration Utility Module

This module provides functions for loading and accessing application settings.
Experiment parameters live in flat key=value files (see harness.experiment_config);
this module only covers the process-wide settings kept in config.yaml.
"""

import logging
import yaml
from pathlib import Path
from typing import Dict, Any, Optional

# Default settings file path
CONFIG_FILE_PATH = "config.yaml"

# Cached configuration
_config_cache: Optional[Dict[str, Any]] = None


def load_yaml_config() -> Dict[str, Any]:
    """
    Load settings from the YAML file.

    Returns:
        Dict[str, Any]: Settings dictionary from YAML file or empty dict if file not found.
    """
    try:
        config_path = Path(CONFIG_FILE_PATH)
        if config_path.exists():
            with open(config_path, "r") as f:
                return yaml.safe_load(f) or {}
        else:
            logging.warning(f"Configuration file not found: {CONFIG_FILE_PATH}")
            return {}
    except Exception as e:
        logging.error(f"Error loading configuration file: {e}")
        return {}


def get_config() -> Dict[str, Any]:
    """
    Get the application settings from the YAML file, with defaults filled in.

    Settings are cached after first load.

    Returns:
        Dict[str, Any]: A flat dictionary of application settings.
    """
    global _config_cache
    if _config_cache is not None:
        return _config_cache

    yaml_config = load_yaml_config()

    logging_config = yaml_config.get("logging", {}) or {}
    harness_config = yaml_config.get("harness", {}) or {}
    numerics_config = yaml_config.get("numerics", {}) or {}

    config = {
        # Logging
        "log_level": str(logging_config.get("level", "INFO")),
        "log_file": logging_config.get("file"),

        # Harness defaults
        "default_jobs": int(harness_config.get("jobs", 1)),
        "default_output_dir": str(harness_config.get("output_dir", "runs")),
        "scatter_batch_size": int(harness_config.get("scatter_batch_size", 100)),

        # Numerics
        "spectral_iters": int(numerics_config.get("spectral_iters", 500)),
        "spectral_tol": float(numerics_config.get("spectral_tol", 1e-12)),
        "gradient_check_eps": float(numerics_config.get("gradient_check_eps", 1e-5)),
    }

    _config_cache = config
    return config


def get_config_value(key: str, default: Optional[Any] = None) -> Any:
    """
    Get a specific setting.

    Args:
        key (str): The setting key to retrieve.
        default (Optional[Any], optional): The default value if the key is not found. Defaults to None.

    Returns:
        Any: The setting value.
    """
    config = get_config()
    return config.get(key, default)


def clear_config_cache() -> None:
    """Drop the cached settings so the next get_config() reloads config.yaml."""
    global _config_cache
    _config_cache = None
