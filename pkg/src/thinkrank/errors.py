"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ThinkrankError(Exception):
    """Base class for every error raised by this package."""


class ParseError(ThinkrankError):
    """Malformed input file. Carries the 1-based line number when known."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class ValidationError(ThinkrankError):
    """Input is well-formed but violates a domain invariant."""


class ConfigurationError(ThinkrankError):
    """Bad or inconsistent configuration (missing prompt key, bad template...)."""


class BackendError(ThinkrankError):
    """The completion backend answered with a non-2xx status."""

    def __init__(self, message: str, status: int | None = None, body: str = ""):
        self.status = status
        self.body = body
        super().__init__(message)


class TransportError(BackendError):
    """The backend could not be reached after all retries."""


class CapabilityError(BackendError):
    """The backend response lacks something we need (e.g. token logprobs)."""


class UndecidableError(ThinkrankError):
    """Neither answer token appeared among the returned alternatives."""


class JudgmentError(ThinkrankError):
    """A single (query, document) judgment could not be produced."""


class MalformedVerdict(ThinkrankError):
    """Teacher output has no parseable true/false verdict."""


class PipelinePaused(ThinkrankError):
    """Generation stopped on backend exhaustion; rerun to resume from the journal."""
