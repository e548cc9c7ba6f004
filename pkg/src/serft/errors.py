"""Exception hierarchy shared across the pipeline.

Three broad families map onto CLI exit codes: configuration problems (2),
data problems (3), and training divergence (4). Module-specific errors
subclass one of these so the CLI never has to know about individual
failure modes.
"""


class SerftError(Exception):
    """Base class for all package errors."""


class ConfigError(SerftError):
    """Invalid or inconsistent configuration. CLI exit code 2."""


class DataError(SerftError):
    """Malformed, missing, or inconsistent data artifacts. CLI exit code 3."""


class TrainingDivergedError(SerftError):
    """Loss became non-finite during optimization. CLI exit code 4."""
