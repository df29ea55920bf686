import logging

import pytest
from pydantic import ValidationError

from crossfact.config import Settings, get_settings
from crossfact.observability import configure_logging, log_duration


def test_load_settings_has_defaults() -> None:
    settings = get_settings()

    assert settings.log_level == "INFO"
    assert settings.log_format == "text"
    assert settings.ece_bins == 20
    assert settings.eval_batch_size == 256
    assert settings.compare_workers == 1


def test_settings_read_prefixed_environment(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("CROSSFACT_ECE_BINS", "10")
    monkeypatch.setenv("CROSSFACT_LOG_FORMAT", "json")

    settings = get_settings()

    assert settings.ece_bins == 10
    assert settings.log_format == "json"


def test_settings_reject_unknown_log_format() -> None:
    with pytest.raises(ValidationError):
        Settings(log_format="xml")


def test_explicit_settings_override_defaults(test_settings: Settings) -> None:
    assert test_settings.log_level == "DEBUG"
    assert test_settings.eval_batch_size == 16
    assert test_settings.show_progress is False


def test_settings_reject_zero_bins() -> None:
    with pytest.raises(ValidationError):
        Settings(ece_bins=0)


def test_get_settings_is_cached() -> None:
    assert get_settings() is get_settings()


def test_configure_logging_sets_root_level() -> None:
    configure_logging(level="warning")
    assert logging.getLogger().level == logging.WARNING
    configure_logging(level="info")
    assert logging.getLogger().level == logging.INFO


def test_log_duration_preserves_result(caplog: pytest.LogCaptureFixture) -> None:
    @log_duration("adding")
    def add(a: int, b: int) -> int:
        return a + b

    with caplog.at_level(logging.DEBUG, logger="crossfact.observability"):
        assert add(2, 3) == 5
    assert any("adding took" in record.message for record in caplog.records)
