"""
Logging configuration for the application.
"""
import logging
import subprocess
import sys
from datetime import datetime
from pathlib import Path
from typing import Optional, Union

from src.config import LOG_DIR


def get_git_info() -> str:
    """Get current git commit information."""
    try:
        commit_hash = subprocess.check_output(
            ['git', 'rev-parse', '--short', 'HEAD'], stderr=subprocess.DEVNULL
        ).decode('ascii').strip()
        return f"commit-{commit_hash}"
    except Exception:
        return "no-git-info"


def setup_logging(log_dir: Optional[Union[str, Path]] = None, level: str = "INFO") -> logging.Logger:
    """Configure logging for the application.

    Args:
        log_dir: Directory for the log file (defaults to GIVE_LOG_DIR / logs)
        level: Root log level name

    Returns:
        The module logger, after an initial message has been written
    """
    log_dir = Path(log_dir) if log_dir is not None else LOG_DIR
    log_dir.mkdir(parents=True, exist_ok=True)

    # Get current date for log file naming
    current_date = datetime.now().strftime("%Y-%m-%d")
    git_info = get_git_info()

    # force=True so repeated CLI invocations in one process reconfigure cleanly
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_dir / f"give_{current_date}_{git_info}.log", mode='a'),
            logging.StreamHandler(sys.stderr)
        ],
        force=True
    )

    logger = logging.getLogger(__name__)
    logger.debug(f"Logging system initialized in {log_dir.absolute()}")
    return logger
