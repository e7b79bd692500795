"""Exception hierarchy shared by every module."""


class ScD2TEError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(ScD2TEError, ValueError):
    pass


class InvalidInputError(ScD2TEError, ValueError):
    """Input data is malformed (non-finite values, bad geometry)."""


class InvalidStateError(ScD2TEError, RuntimeError):
    pass


class SolverError(ScD2TEError, RuntimeError):
    """A solver violated its own descent guarantee; indicates a bug."""


class UndefinedMetricError(ScD2TEError, ValueError):
    """Metric is undefined for the given masks (e.g. both empty)."""


class FormatError(ScD2TEError, ValueError):
    """File could not be parsed; the message names the offending path."""


class IntegrityError(ScD2TEError, ValueError):
    """Model file is corrupt or truncated; the message names the block."""


class ManifestError(ScD2TEError, ValueError):
    pass


class ConfigError(ScD2TEError, ValueError):
    pass
