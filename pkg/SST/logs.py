"""
Logging setup.

Console output goes through a rich handler on stderr. A plain-text copy
is kept under `$XDG_STATE_HOME/SST/logs` (or `~/.local/state/SST/logs`
when the variable is unset) so long training runs can be inspected
after the terminal is gone.
"""

import logging
import os
from pathlib import Path

from rich.console import Console
from rich.logging import RichHandler

LOG_FORMAT = "%(asctime)s %(levelname)-8s %(name)s: %(message)s"


def state_dir() -> Path:
    base = Path(os.environ.get("XDG_STATE_HOME", Path.home() / ".local" / "state"))
    return base / "SST"


def log_dir() -> Path:
    return state_dir() / "logs"


def setup_logging(verbosity: int = 0, log_file: bool = True) -> logging.Logger:
    """
    Configure the `SST` logger hierarchy.

    Parameters
    ----------
    verbosity : int
        0 shows warnings, 1 info, 2 or more debug.
    log_file : bool
        Also append to `sst.log` in the state directory.

    Returns
    -------
    logging.Logger
        The package root logger.
    """
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    root = logging.getLogger("SST")
    root.setLevel(logging.DEBUG)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    console = RichHandler(
        console=Console(stderr=True), show_path=False, rich_tracebacks=False
    )
    console.setLevel(level)
    root.addHandler(console)

    if log_file:
        try:
            directory = log_dir()
            directory.mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(directory / "sst.log", encoding="utf-8")
        except OSError:
            root.warning("log directory is not writable, file logging disabled")
        else:
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
            root.addHandler(file_handler)

    root.propagate = False
    return root
