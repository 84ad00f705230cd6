"""Exception types shared across the package.

Each class carries the CLI exit status it maps to.
"""


class TokenPruneError(Exception):
    exit_code = 1


class DimensionError(TokenPruneError, ValueError):
    exit_code = 3


class ConfigError(TokenPruneError, ValueError):
    exit_code = 3


class StateError(TokenPruneError, RuntimeError):
    exit_code = 1


class DegenerateStateError(TokenPruneError, ValueError):
    """A state with zero surviving tokens reached an op that needs at least one."""

    exit_code = 5


class TrainingError(TokenPruneError, RuntimeError):
    """Non-finite loss, gradient or ratio during optimisation."""

    exit_code = 5


class DependencyError(TokenPruneError):
    """A CLI phase was run before the phase that produces its inputs."""

    exit_code = 4

    def __init__(self, missing_phase, message):
        super().__init__(message)
        self.missing_phase = missing_phase


class FormatError(TokenPruneError, ValueError):
    exit_code = 3


class TruncatedFileError(FormatError):
    pass


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class ChecksumError(FormatError):
    pass
