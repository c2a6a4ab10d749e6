import logging

import pytest

from SST.errors import CheckpointVersionError, ConfigError, DivergenceError
from SST.safe import Err, Ok, debug_enabled, safe


class TestOk:
    def test_value(self):
        """Ok is truthy and hands back its value."""
        result = Ok([1, 2])
        assert result
        assert result.unwrap() == [1, 2]
        assert result.unwrap_or(None) == [1, 2]
        assert result.exit_code == 0

    def test_map(self):
        assert Ok(5).map(lambda x: x + 2) == Ok(7)

    def test_match(self):
        """The value binds positionally in a match statement."""
        match Ok("target.wav"):
            case Ok(path):
                assert path == "target.wav"
            case _:
                pytest.fail("Ok did not match")


class TestErr:
    def test_error(self):
        """Err is falsy, re-raises on unwrap and falls back on unwrap_or."""
        error = CheckpointVersionError("model version 2, expected 1")
        result = Err(error)
        assert not result
        assert result.unwrap_or("fallback") == "fallback"
        with pytest.raises(CheckpointVersionError, check=lambda e: e is error):
            result.unwrap()

    def test_map_is_identity(self):
        result = Err(RuntimeError("boom"))
        assert result.map(lambda x: x + 1) is result

    @pytest.mark.parametrize(
        "error, code",
        [
            (ConfigError("unknown key"), 2),
            (CheckpointVersionError("old"), 3),
            (DivergenceError("nan loss"), 4),
            (FileNotFoundError("capture.wav"), 3),
            (KeyError("x"), 1),
        ],
    )
    def test_exit_code(self, error, code):
        """An Err carries the exit code of its exception."""
        assert Err(error).exit_code == code

    def test_equality(self):
        """Two Errs are equal only when they hold the same exception."""
        error = RuntimeError("boom")
        assert Err(error) == Err(error)
        assert Err(error) != Err(RuntimeError("boom"))
        assert Ok(3) != Err(error)


class TestSafe:
    def test_value(self):
        @safe
        def successor(num):
            return num + 1

        assert successor(7) == Ok(8)
        assert successor.__name__ == "successor"

    def test_exception(self, caplog):
        """A raising body becomes an Err and is logged at debug level."""

        @safe
        def cmd_train():
            raise DivergenceError("non-finite loss", epoch=3)

        with caplog.at_level(logging.DEBUG, logger="SST.safe"):
            result = cmd_train()
        assert isinstance(result, Err)
        assert result.exit_code == 4
        assert "cmd_train failed" in caplog.text

    def test_debug_mode_propagates(self, monkeypatch):
        """With SST_DEBUG=true the exception escapes the wrapper."""
        monkeypatch.setenv("SST_DEBUG", "true")

        @safe
        def raises_error():
            raise RuntimeError("loud")

        with pytest.raises(RuntimeError, match="loud"):
            raises_error()

    @pytest.mark.parametrize(
        "value, expected",
        [("true", True), ("false", False), ("1", True), ("0", False), ("yes", False)],
    )
    def test_debug_enabled(self, monkeypatch, value, expected):
        """SST_DEBUG is parsed as JSON; anything unparsable means off."""
        monkeypatch.setenv("SST_DEBUG", value)
        assert debug_enabled() is expected
