from loguru import logger
import os
import sys
from pathlib import Path
from typing import Optional

LOG_DIR_ENV = "TRUSFUSE_LOG_DIR"


def format_message(record):
    """Bare message template, so serialized records carry no trailing newline in "text"."""
    return "{message}"


class TrusLogger:
    def __init__(self):
        self.logger = logger
        self.logger.remove()

    def add_file_transport(self, log_dir: Path, rotation="00:00", retention="10 days", serialize=True):
        """
        Adds a daily-rotated file transport.

        Args:
            log_dir (Path): The directory to store log files.
            rotation (str, optional): When to rotate the log file. Defaults to "00:00".
            retention (str, optional): How long to keep log files. Defaults to "10 days".
            serialize (bool, optional): Write one JSON record per line. Defaults to True.
        """
        log_file = log_dir / "trusfuse_{time:YYYY-MM-DD}.log"
        self.logger.add(
            log_file,
            rotation=rotation,
            retention=retention,
            serialize=serialize,
            level="DEBUG",
            format=format_message,
            catch=True,
            enqueue=True,
        )

    def add_console_transport(self, level="INFO"):
        self.logger.add(
            sys.stderr,
            level=level,
            format="<green>{time:HH:mm:ss.SSS}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan> - <level>{message}</level> {extra}",
            colorize=True,
        )

    def get_logger(self):
        return self.logger


# serialize=True writes {"text": ..., "record": {...}}; bound context
# (run, seed, epoch) lands in record["extra"].

def resolve_log_dir(log_dir: Optional[Path] = None) -> Path:
    if log_dir is not None:
        return Path(log_dir)
    return Path(os.environ.get(LOG_DIR_ENV, "./.logs"))


def setup_logging(log_dir: Optional[Path] = None, verbose: bool = False):
    """
    Configures and returns the logger for the trusfuse CLI.

    File logs always go to the log directory; console logs only with --verbose.
    """
    log_dir = resolve_log_dir(log_dir)
    trus_logger = TrusLogger()
    try:
        log_dir.mkdir(parents=True, exist_ok=True)
        trus_logger.add_file_transport(log_dir)
    except OSError:
        trus_logger.add_console_transport("WARNING")
        trus_logger.get_logger().warning(f"Cannot write logs to {log_dir}; file logging disabled")
        return trus_logger.get_logger()
    if verbose:
        trus_logger.add_console_transport("DEBUG")
    return trus_logger.get_logger()
