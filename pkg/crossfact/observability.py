"""Minimal observability: logging setup and timing."""

import logging
import time
from functools import wraps
from typing import Any, Callable, Optional

try:
    from pythonjsonlogger.json import JsonFormatter
except ImportError:  # python-json-logger < 3.1
    from pythonjsonlogger.jsonlogger import JsonFormatter

from crossfact.config import get_settings

_TEXT_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
_JSON_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"

_configured: bool = False

logger = logging.getLogger(__name__)


def configure_logging(level: Optional[str] = None, fmt: Optional[str] = None) -> None:
    """Install the root handler (idempotent; later calls only adjust the level)."""
    global _configured
    settings = get_settings()
    level = (level or settings.log_level).upper()
    fmt = fmt or settings.log_format

    root = logging.getLogger()
    root.setLevel(level)
    if _configured:
        return

    handler = logging.StreamHandler()
    if fmt == "json":
        handler.setFormatter(JsonFormatter(_JSON_FORMAT))
    else:
        handler.setFormatter(logging.Formatter(_TEXT_FORMAT))
    root.addHandler(handler)
    _configured = True


def log_duration(name: Optional[str] = None) -> Callable:
    """Decorator logging the wall time of the wrapped call at DEBUG."""
    def decorator(func: Callable) -> Callable:
        label = name or func.__name__

        @wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            start = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                logger.debug(f"{label} took {time.perf_counter() - start:.3f}s")
        return wrapper
    return decorator
