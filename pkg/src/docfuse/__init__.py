"""Multimodal (OCR text + page image) document classification in plain numpy."""

from .errors import ConfigError, DataError, DimensionError, DocfuseError, FormatError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "DimensionError", "DocfuseError", "FormatError", "__version__"]
