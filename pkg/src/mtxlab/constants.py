"""Closed-form constants and explicit radial solutions.

Everything in this module is dimension-indexed and purely analytic: sphere
areas, the sharp exponential constants for zero-boundary and mean-zero
settings, the explicit entire bubble solution of the critical equation
``-div(|grad(f)|^(n-2) grad(f)) = exp(n/(n-1) * beta_n * f)``, and the
capacity-driven upper bound for the exponential functional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy import integrate

__all__ = [
    "SharpConstants",
    "BubbleProfile",
    "surface_area",
    "harmonic_number",
    "sharp_constants",
    "bubble_value",
    "bubble_gradient",
    "bubble_residual",
    "bubble_mass",
    "bubble_mass_tail_bound",
    "capacity_upper_bound",
]

# exp() overflows near 709 in double precision; shared guard value
EXP_CAP = 700.0


def _check_dimension(n):
    if not isinstance(n, (int,)) or isinstance(n, bool):
        raise TypeError(f"dimension must be an integer, got {n!r}")
    if n < 2:
        raise ValueError(f"dimension must be >= 2, got {n}")


def surface_area(n: int) -> float:
    """Surface area of the unit sphere in R^n, i.e. 2*pi^(n/2)/Gamma(n/2)."""
    _check_dimension(n)
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


def harmonic_number(k: int) -> float:
    """Partial harmonic sum 1 + 1/2 + ... + 1/k (0 for k = 0)."""
    if k < 0:
        raise ValueError(f"harmonic_number needs k >= 0, got {k}")
    return sum(1.0 / j for j in range(1, k + 1))


@dataclass(frozen=True)
class SharpConstants:
    """Sharp exponential constants for dimension n.

    ``alpha_n`` is the zero-boundary-data constant, ``beta_n`` the mean-zero
    constant; they satisfy beta_n = alpha_n * 2**(-1/(n-1)).  ``harmonic`` is
    the partial sum 1 + 1/2 + ... + 1/(n-1) entering the capacity bound.
    """

    n: int
    omega: float
    alpha_n: float
    beta_n: float
    harmonic: float


def sharp_constants(n: int) -> SharpConstants:
    """Compute omega_{n-1}, alpha_n = n*omega^(1/(n-1)),
    beta_n = n*(omega/2)^(1/(n-1)) and the harmonic sum H_{n-1}."""
    _check_dimension(n)
    omega = surface_area(n)
    ex = 1.0 / (n - 1)
    return SharpConstants(
        n=n,
        omega=omega,
        alpha_n=n * omega**ex,
        beta_n=n * (omega / 2.0) ** ex,
        harmonic=harmonic_number(n - 1),
    )


def _bubble_coeff(n):
    """Radial coefficient (omega_{n-1}/(2n))^(1/(n-1)) of the bubble."""
    return (surface_area(n) / (2.0 * n)) ** (1.0 / (n - 1))


def bubble_value(n: int, radius: float) -> float:
    """Value of the explicit bubble at distance ``radius`` from its peak.

    The bubble is the entire radial solution
    ``-(n-1)/beta_n * log(1 + k * r^(n/(n-1)))`` with k = (omega/(2n))^(1/(n-1));
    it vanishes at the origin and decreases in r.
    """
    _check_dimension(n)
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    sc = sharp_constants(n)
    k = _bubble_coeff(n)
    return -(n - 1) / sc.beta_n * math.log1p(k * radius ** (n / (n - 1)))


def bubble_gradient(n: int, radius: float) -> float:
    """Radial derivative of the bubble at ``radius`` > 0 (negative)."""
    _check_dimension(n)
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    sc = sharp_constants(n)
    k = _bubble_coeff(n)
    rp = radius ** (n / (n - 1))
    return -(n - 1) / sc.beta_n * k * (n / (n - 1)) * rp / radius / (1.0 + k * rp)


@dataclass(frozen=True)
class BubbleProfile:
    """Explicit bubble in dimension n; callable wrapper around bubble_value."""

    n: int

    def __call__(self, radius):
        return bubble_value(self.n, radius)

    def gradient(self, radius):
        return bubble_gradient(self.n, radius)


def bubble_residual(n: int, radius: float, step: float) -> float:
    """Radial finite-difference residual of the bubble equation.

    Evaluates ``-lap_n(f) - exp(n/(n-1)*beta_n*f)`` at r = radius using the
    radial form ``lap_n(f) = r^(1-n) * (r^(n-1) |f'|^(n-2) f')'`` with central
    differences of size ``step``.  Vanishes as step -> 0 because the closed
    form solves the equation exactly.
    """
    _check_dimension(n)
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    if step >= radius:
        raise ValueError(f"step {step} must be smaller than radius {radius}")
    sc = sharp_constants(n)

    def flux(r):
        # r^(n-1) |f'|^(n-2) f', with f' by central difference
        df = (bubble_value(n, r + 0.5 * step) - bubble_value(n, r - 0.5 * step)) / step
        return r ** (n - 1) * abs(df) ** (n - 2) * df

    lap = (flux(radius + 0.5 * step) - flux(radius - 0.5 * step)) / step * radius ** (1 - n)
    rhs = math.exp(n / (n - 1) * sc.beta_n * bubble_value(n, radius))
    return -lap - rhs


def bubble_mass(n: int, cutoff_radius: float) -> float:
    """Integral of exp(n/(n-1)*beta_n*bubble) over the ball of given radius.

    Computed by adaptive radial quadrature; increases with the radius and
    tends to 2 as the radius grows.  Raises RuntimeError when the quadrature
    does not converge.
    """
    _check_dimension(n)
    if cutoff_radius <= 0:
        raise ValueError(f"cutoff_radius must be > 0, got {cutoff_radius}")
    omega = surface_area(n)
    k = _bubble_coeff(n)
    p = n / (n - 1)

    def integrand(r):
        # omega * r^(n-1) * (1 + k r^p)^(-n)
        return omega * r ** (n - 1) * (1.0 + k * r**p) ** (-n)

    # break the interval at the unit scale of the profile so QUADPACK sees
    # the transition from power growth to power decay
    pts = [r for r in (1.0, 10.0, 100.0) if r < cutoff_radius]
    val, err = integrate.quad(integrand, 0.0, cutoff_radius, points=pts or None, limit=200)
    if not math.isfinite(val) or err > 1e-8 * max(1.0, abs(val)):
        raise RuntimeError(
            f"radial quadrature failed to converge: value={val}, error estimate={err}"
        )
    return val


def bubble_mass_tail_bound(n: int, cutoff_radius: float) -> float:
    """Upper bound for the mass outside the cutoff ball.

    The integrand decays like r^[(1-2n)/(n-1)]; bounding (1 + k r^p)^(-n) by
    (k r^p)^(-n) gives a closed-form tail integral.
    """
    _check_dimension(n)
    if cutoff_radius <= 0:
        raise ValueError(f"cutoff_radius must be > 0, got {cutoff_radius}")
    omega = surface_area(n)
    k = _bubble_coeff(n)
    # exponent of r in the bound: (n-1) - n^2/(n-1) = (1-2n)/(n-1) < -1
    q = (1.0 - 2.0 * n) / (n - 1.0)
    return omega * k ** (-n) * cutoff_radius ** (q + 1) / (-(q + 1))


def capacity_upper_bound(n: int, A_p: float, domain_volume: float) -> float:
    """Capacity-derived ceiling |Omega| + (omega/(2n)) * exp(beta_n*A_p + H_{n-1}).

    ``A_p`` is the constant (regular) part of the Green function at its
    singular boundary point, ``domain_volume`` the measure of the domain.
    """
    _check_dimension(n)
    if domain_volume <= 0:
        raise ValueError(f"domain_volume must be > 0, got {domain_volume}")
    sc = sharp_constants(n)
    expo = sc.beta_n * A_p + sc.harmonic
    if expo > EXP_CAP:
        raise OverflowError(f"exponent {expo:.3g} exceeds the overflow guard {EXP_CAP}")
    return domain_volume + sc.omega / (2.0 * n) * math.exp(expo)
