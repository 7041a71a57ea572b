"""Exception hierarchy shared across the package."""

from __future__ import annotations


class CaptionChainError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(CaptionChainError):
    """Caller violated a documented precondition (bad arguments, not bad data)."""


class ParseError(CaptionChainError):
    """A model reply or raw value could not be decoded into a usable result."""

    def __init__(self, message: str, reply: str | None = None):
        super().__init__(message)
        self.reply = reply


class ImagingError(CaptionChainError):
    """Image decode/encode failure or unusable crop region."""


class BackendError(CaptionChainError):
    """Backend configuration problem or exhausted transport retries."""


class ReplayMissError(BackendError):
    """A replay lookup missed; replays never fall through to a live call."""

    def __init__(self, digest: str):
        super().__init__(f"no transcript entry for request digest {digest}")
        self.digest = digest


class OracleError(CaptionChainError):
    """A scripted-scene backend received a request it cannot resolve."""


class StrategyError(CaptionChainError):
    """A strategy run produced no usable box. Carries the partial trace."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class DatasetError(CaptionChainError):
    """Dataset file missing, malformed, or containing invalid samples."""


class GenerationError(CaptionChainError):
    """Synthetic scene generation could not satisfy the requested parameters."""
