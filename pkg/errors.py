"""Exception types shared by every module, and the exit codes the CLI maps them to."""


class DveoError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigError(DveoError):
    """Bad configuration or calibration value. Message names the offending key."""

    exit_code = 3


class DataError(DveoError):
    """Dataset content is inconsistent (timestamp regression, count mismatch...)."""

    exit_code = 4


class LoadError(DataError):
    """A file referenced by a dataset could not be found or decoded."""


class NumericalFault(DveoError):
    """The filter reached a numerically invalid state.

    `dump` holds whatever arrays help diagnose the fault (state vector,
    covariance, Jacobians); the CLI writes it next to the run outputs.
    """

    exit_code = 5

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dict(dump or {})
