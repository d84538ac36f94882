"""Exception hierarchy shared across the package.

Each top-level branch maps to one process exit code so the command line
front end can translate failures without inspecting messages.
"""

from __future__ import annotations


class FeedbackLabError(Exception):
    """Base class for all package-specific errors."""

    exit_code = 3


class ConfigError(FeedbackLabError):
    """Invalid, incomplete, or contradictory configuration."""

    exit_code = 2


class PipelineError(FeedbackLabError):
    """A pipeline stage failed on otherwise well-formed input."""

    exit_code = 3


class IngestError(PipelineError):
    """Corpus or annotation files are malformed or inconsistent."""


class StatsError(PipelineError):
    """A statistical routine was called on data outside its domain."""


class JudgeError(PipelineError):
    """Transport-level judge failure (network, HTTP, retry exhaustion)."""


class JudgeFormatError(FeedbackLabError):
    """The judge returned output that failed schema validation even
    after the single repair attempt.  Carries the offending raw text."""

    exit_code = 4

    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text
