"""
Command results.

Every command body in `SST.cli` is decorated with `safe`. A decorated
call returns `Ok(value)` on success and `Err(error)` when the body
raises; both carry the process exit code, so `main` only has to report
the error and return `result.exit_code`.

    >>> @safe
    ... def load(path): ...
    >>> match load("capture.wav"):
    ...     case Ok(audio): ...
    ...     case Err(error): ...

SST_DEBUG=true turns the wrapping off and lets the exception escape
with its traceback.
"""

import json
import logging
import os
from dataclasses import dataclass
from functools import wraps
from typing import Any, Callable, ClassVar, Generic, Never, ParamSpec, TypeVar

from SST.errors import exit_code_for

logger = logging.getLogger(__name__)

T = TypeVar("T")
U = TypeVar("U")
P = ParamSpec("P")


@dataclass(frozen=True)
class Ok(Generic[T]):
    """A command that finished with `value`."""

    value: T
    exit_code: ClassVar[int] = 0

    def __bool__(self) -> bool:
        return True

    def unwrap(self) -> T:
        return self.value

    def unwrap_or(self, default: Any, /) -> T:
        return self.value

    def map(self, op: Callable[[T], U], /) -> "Ok[U]":
        return Ok(op(self.value))


@dataclass(frozen=True, eq=False)
class Err:
    """A command that raised `error`; equal only to the same exception."""

    error: BaseException

    def __bool__(self) -> bool:
        return False

    def __eq__(self, other: Any, /) -> bool:
        return isinstance(other, Err) and other.error is self.error

    def __hash__(self) -> int:
        return id(self.error)

    @property
    def exit_code(self) -> int:
        return exit_code_for(self.error)

    def unwrap(self) -> Never:
        raise self.error

    def unwrap_or(self, default: U, /) -> U:
        return default

    def map(self, op: Callable[[Any], Any], /) -> "Err":
        return self


Result = Ok[Any] | Err


def debug_enabled() -> bool:
    """SST_DEBUG is read as JSON; anything unparsable counts as off."""
    try:
        return bool(json.loads(os.environ.get("SST_DEBUG", "false")))
    except json.JSONDecodeError:
        return False


def safe(func: Callable[P, Any]) -> Callable[P, Result]:
    """Run `func` and fold its outcome into a `Result`."""

    @wraps(func)
    def wrapper(*args: P.args, **kwargs: P.kwargs) -> Result:
        if debug_enabled():
            return Ok(func(*args, **kwargs))
        try:
            return Ok(func(*args, **kwargs))
        except Exception as err:
            logger.debug("%s failed", func.__name__, exc_info=err)
            return Err(err)

    return wrapper
