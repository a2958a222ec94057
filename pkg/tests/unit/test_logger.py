"""Unit tests for the CLI logging setup."""
import json

import pytest
from loguru import logger

from cli.logger import LOG_DIR_ENV, resolve_log_dir, setup_logging


@pytest.fixture(autouse=True)
def reset_logger():
    yield
    logger.remove()


@pytest.mark.unit
class TestLogging:
    """File and console transports."""

    def test_file_transport_writes_json(self, temp_dir):
        """Records land in a dated JSON-lines file with bound context."""
        log = setup_logging(temp_dir / "logs")
        log.bind(run="fusion").info("epoch 0 done")
        logger.complete()
        files = list((temp_dir / "logs").glob("trusfuse_*.log"))
        assert len(files) == 1
        record = json.loads(files[0].read_text().splitlines()[-1])
        assert record["text"] == "epoch 0 done"
        assert record["record"]["extra"]["run"] == "fusion"

    def test_unwritable_dir_falls_back(self, temp_dir):
        """A log path that is a file disables file logging without raising."""
        blocker = temp_dir / "file"
        blocker.write_text("")
        log = setup_logging(blocker / "logs")
        log.info("still alive")
        assert not (blocker / "logs").exists()

    def test_resolve_from_environment(self, monkeypatch, temp_dir):
        """The environment variable picks the directory when none is given."""
        monkeypatch.setenv(LOG_DIR_ENV, str(temp_dir))
        assert resolve_log_dir() == temp_dir
        assert resolve_log_dir(temp_dir / "x") == temp_dir / "x"
