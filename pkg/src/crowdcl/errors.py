"""Exception hierarchy shared across the package."""


class CrowdCLError(Exception):
    """Base class for all package errors."""


class ParameterError(CrowdCLError, ValueError):
    """An argument violates an operation's precondition."""


class LoadError(CrowdCLError):
    """A dataset file is missing or unreadable."""


class AnnotationParseError(LoadError):
    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class ConfigError(CrowdCLError):
    """Invalid or inconsistent experiment/training configuration."""


class SpecError(ConfigError):
    """Unknown or invalid model specification."""


class InterfaceError(CrowdCLError):
    """Model/checkpoint/data shapes are incompatible."""


class ScoringError(CrowdCLError):
    pass


class TrainingError(CrowdCLError):
    """Training aborted; ``trace`` holds the records up to the failure."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class MissingRunError(CrowdCLError):
    """A referenced run or trace does not exist."""
