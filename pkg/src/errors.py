"""Typed errors shared by every pipeline stage.

The CLI maps these onto exit codes: invalid input (2), numerical failure (3)
and transport failure (4).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping


class SceneTokensError(Exception):
    """Base class for all scenetokens failures."""


class InvalidArgumentError(SceneTokensError, ValueError):
    """An argument violates an operation precondition."""


class SceneValidationError(InvalidArgumentError):
    """A scene specification breaks one of its structural invariants."""


class UnobservedObjectError(InvalidArgumentError):
    """No ray observes the requested object."""


class NumericalError(SceneTokensError):
    """A loss or intermediate value became non-finite.

    Attributes:
        diagnostics (Dict[str, float]): Parameter norms captured at failure time.
    """

    def __init__(self, message: str, diagnostics: Dict[str, float] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class DivergenceError(NumericalError):
    """Training loss exceeded the divergence threshold."""


@dataclass(frozen=True)
class TransportError(SceneTokensError):
    """Base error for answer-endpoint calls."""

    message: str
    url: str = ""

    def __str__(self) -> str:
        return self.message


@dataclass(frozen=True)
class EndpointTimeoutError(TransportError):
    """The endpoint did not answer within the caller timeout."""

    timeout: float = 0.0


@dataclass(frozen=True)
class EndpointConnectionError(TransportError):
    """The endpoint could not be reached."""

    cause: Exception | None = None


@dataclass(frozen=True)
class EndpointStatusError(TransportError):
    """The endpoint answered with a non-2xx status."""

    status_code: int = 0
    response_body: str = ""
    response_headers: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class EndpointNotFoundError(EndpointStatusError):
    """The endpoint answered 404."""


@dataclass(frozen=True)
class ProtocolError(TransportError):
    """A 2xx reply whose body does not match the answer schema."""

    raw_body: str = ""
