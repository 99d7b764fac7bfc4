"""Concentration diagnostics for near-critical extremals.

Quantifies how a computed maximizer approaches the explicit bubble: peak
value and location, the concentration scale

    r_eps^n = lambda_eps * c_eps^(-n/(n-1)) * exp(-beta_eps * c_eps^(n/(n-1))),

rescaled profiles around the peak (with even reflection across the nearest
boundary tangent for samples leaving the domain), truncation energies, and
the fraction of gradient mass captured near the peak.  Desk-scale meshes
cannot reach the asymptotic regime, so limit statements are reported as
trends; only algebraic identities are asserted exactly.
"""

from __future__ import annotations

import io
import math
import numpy as np
from dataclasses import dataclass

from .constants import bubble_value
from .fem import Field, Workspace, grad_energy
from .mesh import Mesh, PointLocationError, locate_point


@dataclass
class ProfileSamples:
    """Rescaled peak profiles on a reference ball grid."""

    y: np.ndarray  # (S, 2) sample offsets in rescaled coordinates
    psi: np.ndarray  # u(x_eps + r_eps*y)/c_eps
    phi: np.ndarray  # c_eps^(1/(n-1)) * (u(x_eps + r_eps*y) - c_eps)
    radius: float
    n: int


@dataclass
class BlowupReport:
    c_eps: float
    x_eps: np.ndarray
    r_eps: float
    profile_deviation: float
    truncation_energies: list
    gradient_mass_fraction: float
    boundary_distance: float

    def to_record(self):
        return {
            "c_eps": self.c_eps,
            "x_eps": [float(v) for v in self.x_eps],
            "r_eps": self.r_eps,
            "profile_deviation": self.profile_deviation,
            "truncation_energies": [[float(c), float(e)] for c, e in self.truncation_energies],
            "gradient_mass_fraction": self.gradient_mass_fraction,
            "boundary_distance": self.boundary_distance,
        }


def peak(u: Field):
    """Peak magnitude and its node location; ties break at the lowest index."""
    i = int(np.argmax(np.abs(u.coeffs)))
    return float(abs(u.coeffs[i])), u.mesh.nodes[i].copy()


def blowup_scale(lambda_eps: float, c_eps: float, beta_eps: float, n: int) -> float:
    """Concentration radius r_eps from its defining identity."""
    if lambda_eps <= 0 or c_eps <= 0 or beta_eps <= 0:
        raise ValueError("lambda_eps, c_eps, beta_eps must all be positive")
    p = n / (n - 1.0)
    log_rn = math.log(lambda_eps) - p * math.log(c_eps) - beta_eps * c_eps**p
    r = math.exp(log_rn / n)
    if r == 0.0:
        raise ArithmeticError(
            f"blow-up scale underflowed to zero (c_eps={c_eps:.4g} too extreme)"
        )
    return r


def _reflect_across_boundary(mesh: Mesh, x):
    """Even reflection across the line of the nearest boundary face."""
    a = mesh.nodes[mesh.boundary_faces[:, 0]]
    b = mesh.nodes[mesh.boundary_faces[:, 1]]
    ab = b - a
    denom = (ab**2).sum(axis=1)
    t = np.clip(((x - a) * ab).sum(axis=1) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    k = int(np.argmin(((proj - x) ** 2).sum(axis=1)))
    seg = ab[k] / math.sqrt(denom[k])
    normal = np.array([-seg[1], seg[0]])
    return x - 2.0 * ((x - a[k]) @ normal) * normal


def _sample_extended(u: Field, x):
    """P1 value at x, reflecting across the nearest boundary tangent if x
    falls outside; distant fallback is the nearest node value."""
    try:
        elem, lam = locate_point(u.mesh, x)
    except PointLocationError:
        xr = _reflect_across_boundary(u.mesh, x)
        try:
            elem, lam = locate_point(u.mesh, xr)
        except PointLocationError:
            i = int(np.argmin(((u.mesh.nodes - x) ** 2).sum(axis=1)))
            return float(u.coeffs[i])
    return float(u.coeffs[u.mesh.elements[elem]] @ lam)


def rescaled_profiles(
    u: Field,
    c_eps: float,
    x_eps,
    r_eps: float,
    n: int,
    radius: float = 2.0,
    grid: int = 17,
) -> ProfileSamples:
    """Sample the rescaled profiles psi and phi on a ball around the peak.

    ``grid`` points per axis (odd counts keep the center in the grid); the
    center sample is the peak node itself, so psi(0) = 1 and phi(0) = 0 hold
    exactly.  Raises when the sample ball is not small relative to the
    domain scale.
    """
    if radius <= 0 or r_eps <= 0:
        raise ValueError("radius and r_eps must be positive")
    mesh = u.mesh
    ws = Workspace.of(mesh)
    if radius * r_eps > 0.5 * math.sqrt(ws.volume):
        raise ValueError(
            f"sample radius {radius * r_eps:.3g} exceeds the domain scale "
            f"{math.sqrt(ws.volume):.3g}; decrease radius or r_eps"
        )
    x_eps = np.asarray(x_eps, dtype=float)
    axis = np.linspace(-radius, radius, grid if grid % 2 == 1 else grid + 1)
    ys = []
    vals = []
    for yi in axis:
        for yj in axis:
            if yi * yi + yj * yj > radius * radius + 1e-12:
                continue
            y = np.array([yi, yj])
            ys.append(y)
            if yi == 0.0 and yj == 0.0:
                vals.append(c_eps)  # the center is the peak node by definition
            else:
                vals.append(_sample_extended(u, x_eps + r_eps * y))
    ys = np.asarray(ys)
    vals = np.asarray(vals)
    psi = vals / c_eps
    phi = c_eps ** (1.0 / (n - 1.0)) * (vals - c_eps)
    return ProfileSamples(y=ys, psi=psi, phi=phi, radius=radius, n=n)


def profile_deviation(samples: ProfileSamples, n: int | None = None, radius: float | None = None) -> float:
    """Sup over the sampled ball of |phi - bubble|."""
    n = n if n is not None else samples.n
    radius = radius if radius is not None else samples.radius
    r = np.linalg.norm(samples.y, axis=1)
    keep = r <= radius + 1e-12
    dev = 0.0
    for ri, pi in zip(r[keep], samples.phi[keep]):
        dev = max(dev, abs(pi - bubble_value(n, float(ri))))
    return dev


def truncation_energy(u: Field, c: float, c_eps: float, n: int) -> float:
    """Gradient energy of the nodal truncation min(u, c_eps/c), c > 1."""
    if c <= 1:
        raise ValueError(f"truncation level requires c > 1, got {c}")
    capped = np.minimum(u.coeffs, c_eps / c)
    return grad_energy(Field(u.mesh, capped), n)


def gradient_concentration(u: Field, x_eps, radius: float, n: int = 2) -> float:
    """Fraction of the total gradient mass on elements near the peak.

    Elements count when their centroid lies within ``radius`` of x_eps; the
    fraction is nondecreasing in the radius and reaches 1 once the radius
    covers the domain.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    ws = Workspace.of(u.mesh)
    gu = ws.element_grad(u.coeffs)
    dens = np.hypot(gu[:, 0], gu[:, 1]) ** n * ws.areas
    total = dens.sum()
    if total == 0:
        return 0.0
    x_eps = np.asarray(x_eps, dtype=float)
    cent = u.mesh.element_centroids()
    near = ((cent - x_eps) ** 2).sum(axis=1) <= radius * radius
    return float(dens[near].sum() / total)


def scale_identity_gap(r_eps, lambda_eps, c_eps, beta_eps, n):
    """Relative defect of r_eps^n * c^(n/(n-1)) * exp(beta*c^(n/(n-1))) = lambda."""
    p = n / (n - 1.0)
    lhs = n * math.log(r_eps) + p * math.log(c_eps) + beta_eps * c_eps**p
    return abs(lhs - math.log(lambda_eps))


def diagnose(
    result,
    radius: float = 2.0,
    truncation_levels=(1.5, 2.0, 3.0, 4.0),
    concentration_factor: float = 10.0,
    n: int = 2,
) -> BlowupReport:
    """Full blow-up report for a converged maximizer."""
    u = result.u
    c_eps, x_eps = peak(u)
    r_eps = blowup_scale(result.lambda_eps, c_eps, result.beta_eps, n)
    mesh = u.mesh
    ws = Workspace.of(mesh)
    # keep the sample ball inside the domain scale
    rad = radius
    while rad * r_eps > 0.4 * math.sqrt(ws.volume) and rad > 0.1:
        rad *= 0.5
    samples = rescaled_profiles(u, c_eps, x_eps, r_eps, n, radius=rad)
    dev = profile_deviation(samples)
    trunc = [(c, truncation_energy(u, c, c_eps, n)) for c in truncation_levels]
    frac = gradient_concentration(u, x_eps, concentration_factor * r_eps, n)
    return BlowupReport(
        c_eps=c_eps,
        x_eps=np.asarray(x_eps, dtype=float),
        r_eps=r_eps,
        profile_deviation=dev,
        truncation_energies=trunc,
        gradient_mass_fraction=frac,
        boundary_distance=float(mesh.boundary_distance(x_eps)),
    )


def profiles_to_csv(samples: ProfileSamples) -> str:
    """CSV table (y1, y2, psi, phi, bubble) of the sampled profiles."""
    buf = io.StringIO()
    buf.write("y1,y2,psi,phi,bubble\n")
    for (y1, y2), psi, phi in zip(samples.y, samples.psi, samples.phi):
        r = math.hypot(y1, y2)
        buf.write(
            f"{float(y1)!r},{float(y2)!r},{float(psi)!r},{float(phi)!r},"
            f"{bubble_value(samples.n, r)!r}\n"
        )
    return buf.getvalue()
