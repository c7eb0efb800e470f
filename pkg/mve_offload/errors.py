"""
This module contains all the custom exceptions used in the library.

The exceptions are used to notify the caller about the different kinds of errors
that can occur while the server, the FaaS runtime or the storage layer run.

The library exceptions are derived from the ``MveBaseError`` class. Configuration
and argument errors additionally derive from the matching Python builtin
(``ValueError``, ``TypeError``, ``ImportError``) so callers can catch either.

Errors raised by a running component derive from ``SpecialMveError`` and contain:
  - A message describing the error
  - A reference to the component that raised the error (if applicable)
"""

from typing import Any, Optional

from typing_extensions import Unpack


__all__ = [
    "BackendUnavailableError",
    "BlobNotFoundError",
    "ChunkNotLoadedError",
    "MalformedPayloadError",
    "MveBaseError",
    "MveConfigurationError",
    "MveImportError",
    "MveTypeError",
    "MveValueError",
    "NoAvatarsError",
    "ProtocolError",
    "ServerFullError",
    "SpecialMveError",
    "UnknownConstructError",
]


class MveBaseError(Exception):
    """Base error for all errors explicitly raised within the library."""


class MveImportError(MveBaseError, ImportError):
    """Import error."""


class MveValueError(MveBaseError, ValueError):
    """Value error."""


class MveTypeError(MveBaseError, TypeError):
    """Type error."""


class MveConfigurationError(MveBaseError, ValueError):
    """Configuration error, raised for invalid config files, env overrides or back-end clients."""


class SpecialMveError(MveBaseError):
    """Base error for errors raised by a running component."""

    def __init__(
        self,
        message: str,
        source: Optional[Any] = None,
        *args: Unpack[tuple[Any, ...]],
        **kwargs: Unpack[dict[str, Any]],
    ) -> None:
        super().__init__(message, *args, **kwargs)  # type: ignore[arg-type]
        self.source = source
        self.message = message

    def __str__(self) -> str:
        return self.message


class ChunkNotLoadedError(SpecialMveError, KeyError):
    """Raised when a block is accessed in a chunk that is not loaded."""


class NoAvatarsError(SpecialMveError):
    """Raised when a metric needs at least one avatar."""


class ServerFullError(SpecialMveError):
    """Raised when a player connects to a server at its player cap."""


class UnknownConstructError(SpecialMveError, KeyError):
    """Raised when a reply refers to a construct that no longer exists."""


class MalformedPayloadError(SpecialMveError, ValueError):
    """Raised when a binary payload does not decode under its schema."""


class BlobNotFoundError(SpecialMveError, KeyError):
    """Raised when a blob key has never been written."""


class BackendUnavailableError(SpecialMveError, ConnectionError):
    """Raised when a remote back-end can not be reached."""


class ProtocolError(SpecialMveError):
    """Raised on a malformed bot protocol frame."""
