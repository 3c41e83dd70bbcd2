"""Exception hierarchy for sbsm-fit.

Every error derives from both SbsmError and ValueError, so callers that
already guard against ValueError keep working.
"""

from typing import Optional


class SbsmError(Exception):
    """Base class for all sbsm-fit errors."""


class MeshError(SbsmError, ValueError):
    """Invalid mesh data (indices out of range, non-finite coordinates)."""


class ObjParseError(MeshError):
    """Malformed Wavefront OBJ record."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class SymmetryError(MeshError):
    """A vertex has no mirror partner across the x=0 plane."""

    def __init__(self, message: str, vertex: int):
        super().__init__(message)
        self.vertex = vertex


class BankError(SbsmError, ValueError):
    """Semantic bank construction or query misuse."""


class SkeletonError(SbsmError, ValueError):
    """Quadruped skeleton could not be instantiated."""

    def __init__(self, message: str, quadrant: Optional[str] = None):
        super().__init__(message)
        self.quadrant = quadrant


class RenderError(SbsmError, ValueError):
    """Invalid camera or rendering parameters."""


class AutodiffError(SbsmError, ValueError):
    """Misuse of the differentiation tape."""


class ConfigError(SbsmError, ValueError):
    """Invalid or unknown configuration values."""


class FitError(SbsmError, ValueError):
    """Fitting aborted, e.g. a loss term became NaN."""

    def __init__(self, message: str, term: Optional[str] = None):
        super().__init__(message)
        self.term = term


class FtsFormatError(SbsmError, ValueError):
    """Malformed FTS tensor file."""
