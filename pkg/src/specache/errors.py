"""Exception types shared across the package."""

from __future__ import annotations


class SpecacheError(Exception):
    """Base class for package-specific errors."""


class InputError(SpecacheError, ValueError):
    """Malformed caller-supplied data (tokens, distributions, files)."""


class ConfigError(SpecacheError, ValueError):
    """Invalid or inconsistent configuration."""


class MaskError(SpecacheError, ValueError):
    """Attention mask is structurally invalid for the given tree."""


class ProtocolError(SpecacheError, RuntimeError):
    """A cross-module contract was violated at runtime."""


class CorpusFormatError(InputError):
    """Corpus or table file could not be parsed.

    Carries the 1-based line number of the offending record so CLI
    diagnostics can point at it.
    """

    def __init__(self, path: str, line_no: int, reason: str):
        self.path = path
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{path}:{line_no}: {reason}")


class FrontierFull(SpecacheError):
    """The candidate tree has reached its depth cap.

    Control-flow signal: the draft should idle until a correction
    deepens the root, not treat this as a failure.
    """
