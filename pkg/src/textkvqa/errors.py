"""Exception taxonomy shared across the engine.

Callers that need an exit code or HTTP status map on these types, never on
message text.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(EngineError):
    """A caller violated an operation's precondition."""


class DataError(EngineError):
    """An input file or record stream is malformed or unusable."""


class NotFoundError(EngineError):
    """A referenced entity, image, or fixture does not exist."""


class NoVisualTextError(EngineError):
    """An operation that requires visual text received an empty query."""


class TransportError(EngineError):
    """A remote backend was unreachable after the configured retries."""

    def __init__(self, message: str, *, attempts: int = 1, last_status: int | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.last_status = last_status


class ProtocolError(EngineError):
    """A remote or mock backend answered outside its contract."""


class EmptyOutputError(EngineError):
    """A generation backend returned an empty completion."""
