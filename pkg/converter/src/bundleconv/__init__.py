"""Convert pickled citation-network releases into graph bundle directories."""

from .converter import (
    REFERENCE_STATS,
    ConversionError,
    ConversionManifest,
    convert,
)
from .validate import ValidationReport, validate_bundle

__all__ = [
    "REFERENCE_STATS",
    "ConversionError",
    "ConversionManifest",
    "ValidationReport",
    "convert",
    "validate_bundle",
]
