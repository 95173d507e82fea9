"""Exception hierarchy for the ptame toolkit."""


class PTameError(Exception):
    """Base class for all toolkit errors."""


class InputError(PTameError):
    """A runtime argument violates an operation's contract."""


class ConfigurationError(PTameError):
    """Components are wired together inconsistently or a config is invalid."""


class FormatError(PTameError):
    """A serialized payload is corrupt or structurally invalid."""


class DegenerateInputError(InputError):
    """Input is structurally valid but degenerate (all-zero kernel, everything removed)."""


class TrainingError(PTameError):
    """Training diverged. Carries the step index at which it happened."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
