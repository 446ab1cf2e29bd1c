"""
Merge Lab Utilities Module

Provides settings loading and logger setup.
"""

from merge_lab.utils.config import clear_config_cache, get_config, get_config_value
from merge_lab.utils.logger import get_logger, setup_logger

__all__ = [
    'get_config',
    'get_config_value',
    'clear_config_cache',
    'get_logger',
    'setup_logger',
]
