import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Optional, Union

from dotenv import load_dotenv

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
OUT_DIR_ENV = "TOKSOFT_OUT_DIR"


def configure_logging(level: Union[int, str] = logging.INFO) -> None:
    """
    Set up root logging once for the command-line entry point.
    """
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def resolve_out_dir(explicit: Optional[Union[str, Path]] = None, default: Union[str, Path] = ".") -> Path:
    """
    Output directory: the explicit value if given, else TOKSOFT_OUT_DIR (a .env
    file is read for it), else `default`.
    """
    if explicit:
        return Path(explicit)
    load_dotenv()
    return Path(os.environ.get(OUT_DIR_ENV) or default)


def run_stamp() -> dict:
    """
    Start time of a run as YYYY-MM-DD HH:MM:SS, for result dicts.
    """
    return {
        "started_at": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
    }
