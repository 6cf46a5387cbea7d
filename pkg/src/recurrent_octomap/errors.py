"""Exception hierarchy shared by all modules.

The CLI maps each class to a documented exit code (see ``cli.EXIT_CODES``).
"""


class OctomapError(Exception):
    """Base class for every error raised deliberately by this package."""


class ConfigurationError(OctomapError, ValueError):
    """Dimension mismatch, invalid config field, backend/model mismatch."""


class ArgumentError(OctomapError, ValueError):
    """A caller passed an argument outside the operation's contract."""


class NumericError(OctomapError, FloatingPointError):
    """A non-finite value appeared where the math requires finite ones."""


class TrainingDivergedError(NumericError):
    """Loss became NaN/inf during training."""


class FormatError(OctomapError):
    """A persisted file is corrupt, truncated or has the wrong version."""


class UndefinedMetricError(OctomapError, ValueError):
    """A metric was requested on a confusion matrix with no support."""


class DataPathError(OctomapError, FileNotFoundError):
    """Required input files are missing."""


class OutputExistsError(OctomapError, FileExistsError):
    """Refusing to overwrite existing outputs without ``--force``."""
