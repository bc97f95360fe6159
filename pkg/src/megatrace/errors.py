"""Exception hierarchy shared by all megatrace modules."""

from __future__ import annotations


class MegatraceError(Exception):
    """Base class for every error raised by megatrace."""


class TopologyError(MegatraceError, ValueError):
    """A rank or coordinate lies outside the parallel topology."""


class TraceParseError(MegatraceError, ValueError):
    """Trace bytes are not valid JSON.

    Attributes:
        offset: byte offset into the input where decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class TraceSchemaError(MegatraceError, ValueError):
    """Trace JSON is well formed but violates the documented schema."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class IntegrityError(MegatraceError):
    """Analysis input is internally inconsistent (mismatched payloads, clock anomalies)."""


class ProtocolError(MegatraceError):
    """Coordinator protocol misuse: non-member registration, shape mismatch."""


class InfeasibleScheduleError(MegatraceError):
    """No schedule satisfies the requested memory cap."""


class BackpressureError(MegatraceError):
    """A channel buffer is full; the caller must poll/drain before posting again."""


class ConfigError(MegatraceError, ValueError):
    """A TOML configuration file is missing, unparsable or has invalid settings."""
