"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class ChainforgeError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ChainforgeError):
    """A chain configuration failed to parse or validate."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        parts = [message]
        if field:
            parts.append(f"field: {field}")
        if line is not None:
            parts.append(f"line: {line}")
        super().__init__(" | ".join(parts))


class RenderError(ChainforgeError):
    """An inception-prompt template could not be rendered."""


class BackendError(ChainforgeError):
    """A chat or embedding provider failed in a non-retryable way."""


class ScriptExhaustedError(BackendError):
    """A scripted backend ran out of canned responses for a request."""


class MemoryLimitError(ChainforgeError):
    """A dialogue tried to record more rounds than its limit allows."""


class ExtractionError(ChainforgeError):
    """No solution could be extracted from a finished dialogue."""


class WorkspaceError(ChainforgeError):
    """A code block targeted an unsafe path or the workspace is unusable."""


class CodeParseError(ChainforgeError):
    """A chat response contained a malformed fenced code region."""


class EntrypointMissingError(ChainforgeError):
    """The workspace has no runnable entrypoint file."""


class SandboxEnvironmentError(ChainforgeError):
    """The host is missing the interpreter needed to run generated code."""


class UsageError(ChainforgeError):
    """Bad command-line usage (maps to exit code 1)."""
