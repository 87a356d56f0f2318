"""
LIDAR-EPW Configuration
=======================

Configuration layer for the sensor model:
- Environment loading via python-dotenv (.env)
- Logging setup (rich handler on stderr, optional log file)
- YAML / JSON loading helpers for scene, dataset and sensor files

Author: LIDAR-EPW Team
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml
from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler

from .errors import ConfigurationError, FormatError

logger = logging.getLogger(__name__)

THREADS_ENV = "LIDAR_SIM_THREADS"
LOG_LEVEL_ENV = "LOG_LEVEL"
LOG_FILE_ENV = "LIDAR_EPW_LOG_FILE"

_stderr_console = Console(stderr=True)


def load_environment(dotenv_path: Optional[Union[str, Path]] = None) -> None:
    """
    Load variables from a .env file into the process environment.

    Existing environment variables always win over the file.
    """
    load_dotenv(dotenv_path=dotenv_path, override=False)


def setup_logging(level: Optional[str] = None) -> None:
    """
    Configure logging for the command line tools and the service.

    Log level comes from LOG_LEVEL (defaults to INFO). Records go to
    standard error through rich; LIDAR_EPW_LOG_FILE adds a plain file log.
    """
    log_level = (level or os.getenv(LOG_LEVEL_ENV, "INFO")).upper()
    handlers: list = [
        RichHandler(console=_stderr_console, show_path=False, rich_tracebacks=False)
    ]
    log_file = os.getenv(LOG_FILE_ENV)
    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(
            logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
        )
        handlers.append(file_handler)
    logging.basicConfig(
        level=getattr(logging, log_level, logging.INFO),
        format="%(message)s",
        handlers=handlers,
        force=True,
    )


def thread_count() -> int:
    """Thread-count hint from LIDAR_SIM_THREADS; 1 when unset or invalid."""
    raw = os.getenv(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning(f"Ignoring invalid {THREADS_ENV}={raw!r}")
        return 1


def read_mapping(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Read a YAML or JSON file that must contain a mapping.

    Args:
        path: File to read (JSON is accepted since it is a YAML subset)

    Returns:
        Dict[str, Any]: Parsed mapping

    Raises:
        FormatError: If the file is unreadable or not a mapping
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            content = yaml.safe_load(handle)
    except OSError as e:
        raise FormatError(f"Cannot read {path}: {e}") from e
    except yaml.YAMLError as e:
        raise FormatError(f"Cannot parse {path}: {e}") from e
    if content is None:
        return {}
    if not isinstance(content, dict):
        raise FormatError(f"{path} must contain a mapping, got {type(content).__name__}")
    return content


def write_mapping(path: Union[str, Path], content: Dict[str, Any]) -> None:
    """Write a mapping as YAML with stable key order."""
    with open(path, "w", encoding="utf-8") as handle:
        yaml.safe_dump(content, handle, sort_keys=False, default_flow_style=False)


def require_keys(content: Dict[str, Any], allowed: set, source: str) -> None:
    """Reject unknown keys in a configuration mapping."""
    unknown = set(content) - allowed
    if unknown:
        raise ConfigurationError(f"Unknown keys in {source}: {sorted(unknown)}")
