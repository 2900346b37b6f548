import logging
import os

import pytest
from pydantic import ValidationError

from app.settings import Settings
from shapereg.logs import configure_logging


def test_defaults(isolated_env):
    s = Settings()
    assert s.SHAPEREG_LOG == "INFO"
    assert s.SHAPEREG_LOG_FILE is None
    assert s.SHAPEREG_BLOCKS == 10
    assert s.SHAPEREG_SEED == 0
    assert s.threads == (os.cpu_count() or 1)


def test_environment_overrides(isolated_env, monkeypatch):
    monkeypatch.setenv("SHAPEREG_BLOCKS", "5")
    monkeypatch.setenv("SHAPEREG_THREADS", "3")
    s = Settings()
    assert s.SHAPEREG_BLOCKS == 5
    assert s.threads == 3


def test_invalid_values_are_rejected(isolated_env, monkeypatch):
    monkeypatch.setenv("SHAPEREG_THREADS", "0")
    with pytest.raises(ValidationError):
        Settings()


def test_dotenv_in_working_directory(isolated_env, monkeypatch):
    (isolated_env / ".env").write_text("SHAPEREG_SEED=7\nSHAPEREG_LOG=DEBUG\n")
    s = Settings()
    assert s.SHAPEREG_SEED == 7 and s.SHAPEREG_LOG == "DEBUG"
    monkeypatch.setenv("SHAPEREG_SEED", "8")
    assert Settings().SHAPEREG_SEED == 8


def test_log_level_is_normalized_and_checked(isolated_env, monkeypatch):
    monkeypatch.setenv("SHAPEREG_LOG", "warning")
    assert Settings().SHAPEREG_LOG == "WARNING"
    monkeypatch.setenv("SHAPEREG_LOG", "LOUD")
    with pytest.raises(ValidationError):
        Settings()


def test_logging_follows_the_settings_it_is_given(isolated_env):
    env = Settings(SHAPEREG_LOG="ERROR", SHAPEREG_LOG_FILE=str(isolated_env / "x.log"))
    log = configure_logging(env)
    assert log.level == logging.ERROR
    log.getChild("test").error("visible")
    log.getChild("test").warning("hidden")
    log.handlers[0].flush()
    text = (isolated_env / "x.log").read_text()
    assert "visible" in text and "hidden" not in text
    assert configure_logging(env, "debug").level == logging.DEBUG
