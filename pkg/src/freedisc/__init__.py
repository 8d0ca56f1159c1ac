"""Free-discontinuity reconstruction by iterative thresholding."""
from .thresholding import (
    NumericalError,
    ThresholdSpec,
    build_curve,
    jump_location,
    jump_size,
    threshold,
)

__all__ = [
    "NumericalError",
    "ThresholdSpec",
    "build_curve",
    "jump_location",
    "jump_size",
    "threshold",
]
__version__ = "0.1.0"
