"""Logging setup utilities for configuring pipeline-wide logging.

This module provides functions for setting up and configuring logging for the
CLI, the answer server and the training loops, including console and rotating
file handlers.
"""
import logging
import logging.handlers
from pathlib import Path
from config_loader import get_config


def setup_logging(config=None):
    """Configure pipeline-wide logging with console and file handlers.

    Sets up rotating file handlers for both general logs and error-only logs.
    Creates the logs directory if it doesn't exist and configures handlers based
    on the `logging` configuration section.

    The function configures:
    - Console handler for real-time log output (unless disabled)
    - Rotating file handler for general logs (scenetokens.log)
    - Rotating file handler for error-level logs only (scenetokens_errors.log)

    Args:
        config (ConfigLoader, optional): Configuration to read. Defaults to the
            global configuration.

    Returns:
        logging.Logger: The configured root logger instance with all handlers attached.

    Raises:
        OSError: If the logs directory cannot be created due to permission issues.
        AttributeError: If an invalid log level is specified in the configuration.
    """
    config = config or get_config()

    log_format = logging.Formatter(config.get('logging.format'))

    logger = logging.getLogger()
    log_level = getattr(logging, str(config.get('logging.level', 'INFO')).upper())
    logger.setLevel(log_level)

    logger.handlers.clear()

    if config.get('logging.console_handler', True):
        console_handler = logging.StreamHandler()
        console_handler.setLevel(log_level)
        console_handler.setFormatter(log_format)
        logger.addHandler(console_handler)

    if config.get('logging.file_handler', True):
        logs_dir = Path(config.get('files.logs_folder', 'logs'))
        logs_dir.mkdir(parents=True, exist_ok=True)

        max_bytes = config.get('logging.max_file_size_mb', 10) * 1024 * 1024
        backup_count = config.get('logging.backup_count', 5)

        file_handler = logging.handlers.RotatingFileHandler(
            logs_dir / 'scenetokens.log',
            maxBytes=max_bytes,
            backupCount=backup_count
        )
        file_handler.setLevel(log_level)
        file_handler.setFormatter(log_format)
        logger.addHandler(file_handler)

        error_handler = logging.handlers.RotatingFileHandler(
            logs_dir / 'scenetokens_errors.log',
            maxBytes=max_bytes,
            backupCount=backup_count
        )
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(log_format)
        logger.addHandler(error_handler)

    return logger


def setup_flask_logging(app, config=None):
    """Setup Flask-specific logging by integrating with the pipeline logging configuration.

    Args:
        app (flask.Flask): The Flask application instance to configure logging for.
        config (ConfigLoader, optional): Configuration to read.

    Returns:
        logging.Logger: The configured logger instance shared by the pipeline and Flask.
    """
    logger = setup_logging(config)

    app.logger.handlers = logger.handlers
    app.logger.setLevel(logger.level)

    return logger
