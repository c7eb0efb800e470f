"""
Logging helpers shared by all long-lived components.

Every component owns a logger named ``<ClassName>.<instance name>``. Passing a
``log_level`` attaches a dedicated ``StreamHandler``; ``None`` leaves the logger
to the application's logging configuration.
"""

import logging

from typing import Optional, Union

from mve_offload.errors import MveValueError


DEFAULT_LOG_FORMAT = "%(levelname)s %(asctime)s %(name)s %(message)s"
_LOG_LEVEL_BY_NAME = {
    "CRITICAL": logging.CRITICAL,
    "ERROR": logging.ERROR,
    "WARNING": logging.WARNING,
    "INFO": logging.INFO,
    "DEBUG": logging.DEBUG,
}


def normalize_log_level(level: Union[str, int]) -> int:
    """Turn a level name or constant into a ``logging`` level."""
    if isinstance(level, bool):
        raise MveValueError(f"Invalid log level: {level!r}.")
    if isinstance(level, int):
        return level
    if isinstance(level, str):
        normalized = _LOG_LEVEL_BY_NAME.get(level.upper())
        if normalized is not None:
            return normalized
    raise MveValueError(f"Invalid log level: {level!r}.")


def get_logger(
    owner: object,
    name: str,
    log_level: Optional[Union[str, int]] = None,
    log_format: str = DEFAULT_LOG_FORMAT,
) -> logging.Logger:
    """Return the ``<ClassName>.<name>`` logger of a component, configuring it if a level is given.

    :param owner: component instance
    :param name: instance name
    :param log_level: ``str`` name or ``int`` constant; ``None`` attaches no handler
    :param log_format: ``logging.Formatter`` pattern used when ``log_level`` is set
    """
    logger = logging.getLogger(f"{owner.__class__.__name__}.{name}")
    if log_level is None:
        return logger
    level = normalize_log_level(log_level)
    logger.setLevel(level)
    handler = logging.StreamHandler()
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(log_format))
    logger.handlers.clear()
    logger.addHandler(handler)
    logger.propagate = False
    return logger
