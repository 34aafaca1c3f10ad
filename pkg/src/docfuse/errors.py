"""Exception hierarchy shared by every module."""


class DocfuseError(Exception):
    """Base class for all errors raised by docfuse."""


class DimensionError(DocfuseError, ValueError):
    """Tensor shapes do not compose."""


class ConfigError(DocfuseError, ValueError):
    """Invalid hyperparameter or configuration value."""


class DataError(DocfuseError, ValueError):
    """Malformed or inconsistent input data."""


class FormatError(DocfuseError, ValueError):
    """A file could not be decoded in its declared format."""
