"""Directory setup utilities for ensuring required directories exist.

Creates the run output, log and cache folders named in the configuration.
"""
import os
from config_loader import get_config


def ensure_directories(extra_directories=None, config=None):
    """Create all required directories if they don't exist.

    Args:
        extra_directories (list, optional): Additional directories to create,
            typically the output folder of the current command.
        config (ConfigLoader, optional): Configuration object. If None, will be
            loaded using get_config(). Defaults to None.

    Returns:
        list: The directories that were ensured.

    Raises:
        OSError: If directory creation fails due to permission issues or
            invalid paths.
    """
    if config is None:
        config = get_config()

    directories = [
        config.get_output_folder(),
        config.get('files.logs_folder', 'logs'),
        config.get_cache_directory(),
    ]
    directories.extend(str(d) for d in (extra_directories or []))

    for directory in directories:
        os.makedirs(directory, exist_ok=True)
    return directories
