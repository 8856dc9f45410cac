"""
Exception hierarchy for the contour lab.

Library code raises these; the command-line layer maps them to exit codes.
"""

from typing import Any, Dict, Optional


class ContourLabError(Exception):
    """Base class for every error raised by the contour lab"""


class InvalidPolygon(ContourLabError, ValueError):
    """Polygon has too few vertices, non-finite or repeated consecutive vertices"""


class ZeroArea(ContourLabError):
    """Polygon has (numerically) zero signed area"""


class StartOffBoundary(ContourLabError):
    """Resampling start point does not lie on the polygon boundary"""


class NoIntersection(ContourLabError):
    """Ray from the center never meets the polygon boundary"""


class DimensionMismatch(ContourLabError, ValueError):
    """Two masks (or arrays) that must agree in shape do not"""


class CenterOutside(ContourLabError):
    """Neither the bbox center nor the centroid lies strictly inside the polygon"""


class LengthMismatch(ContourLabError, ValueError):
    """Contours compared under fixed pairing have different vertex counts"""


class IndexOutOfRange(ContourLabError, IndexError):
    """A match assignment refers to a point that does not exist"""


class KernelTooWide(ContourLabError, ValueError):
    """Circular convolution kernel is wider than the contour"""


class StaleCache(ContourLabError):
    """Backward pass requested against parameters changed since forward"""


class GenerationExhausted(ContourLabError):
    """Synthetic shape generation rejected too many samples in a row"""


class ConfigError(ContourLabError, ValueError):
    """Configuration value is missing, malformed or out of range"""


class ParseError(ContourLabError, ValueError):
    """Input document (dataset, labels, checkpoint) could not be parsed"""


class IoError(ContourLabError, OSError):
    """Reading or writing an artifact failed"""


class DivergenceDetected(ContourLabError):
    """Training loss became non-finite or exceeded the divergence threshold"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
