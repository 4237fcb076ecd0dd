"""
D.I.S.C.O. Logging Utilities

Console logging goes through rich; artifact directories additionally get a
plain UTF-8 run.log in the classic "time - name - level - message" format.
"""

import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Union

from rich.console import Console
from rich.logging import RichHandler

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

_CONSOLE_HANDLER_NAME = "disco-console"


def get_logger(name: str) -> logging.Logger:
    """
    Get a module logger.

    Handlers live on the root logger (see setup_logging), so library use
    without the CLI stays silent apart from warnings.
    """
    return logging.getLogger(name)


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    """Install the rich console handler on the root logger (idempotent)."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO

    if sys.platform == "win32":
        try:
            if hasattr(sys.stderr, "reconfigure"):
                sys.stderr.reconfigure(encoding="utf-8", errors="replace")
        except Exception:
            pass

    root_logger = logging.getLogger()
    for handler in list(root_logger.handlers):
        if handler.get_name() == _CONSOLE_HANDLER_NAME:
            root_logger.removeHandler(handler)

    handler = RichHandler(
        console=Console(stderr=True),
        show_path=False,
        rich_tracebacks=False,
        log_time_format="[%X]",
    )
    handler.set_name(_CONSOLE_HANDLER_NAME)
    handler.setLevel(level)
    root_logger.addHandler(handler)
    root_logger.setLevel(min(level, logging.INFO))


@contextmanager
def file_log(path: Union[str, Path], level: int = logging.INFO) -> Iterator[logging.Handler]:
    """Mirror every record at `level` or above into a UTF-8 log file while the block runs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="w", encoding="utf-8", errors="replace")
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    root_logger = logging.getLogger()
    previous_level = root_logger.level
    root_logger.addHandler(handler)
    root_logger.setLevel(min(previous_level or logging.WARNING, level))
    try:
        yield handler
    finally:
        root_logger.removeHandler(handler)
        root_logger.setLevel(previous_level)
        handler.close()
