"""Shared exception types; the CLI maps them to exit codes."""


class DomainError(ValueError):
    """Invalid operation or argument at the problem-domain level (exit code 1)."""


class FormatError(ValueError):
    """Malformed file or byte stream (exit code 2)."""


class GenerationError(DomainError):
    """Map generation could not satisfy the requested configuration."""


class IntegrityError(FormatError):
    """A replay diverged from the recorded trajectory."""

    def __init__(self, message, tick=None):
        super().__init__(message)
        self.tick = tick
