"""Numerical laboratory for improved Moser-Trudinger inequalities.

Computes subcritical extremals of the exponential functional under a
mean-zero constraint and the norm (|grad u|_n^n - alpha*|u|_n^n)^(1/n),
diagnoses their concentration against the explicit bubble, and evaluates
Green-function/capacity bounds for the critical functional.
"""

__version__ = "0.1.0"

from .constants import (
    BubbleProfile,
    SharpConstants,
    bubble_mass,
    bubble_residual,
    bubble_value,
    capacity_upper_bound,
    sharp_constants,
    surface_area,
)

__all__ = [
    "BubbleProfile",
    "SharpConstants",
    "bubble_mass",
    "bubble_residual",
    "bubble_value",
    "capacity_upper_bound",
    "sharp_constants",
    "surface_area",
    "__version__",
]
