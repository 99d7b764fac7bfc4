"""Discrete energies, norms and the Neumann eigenvalue of the n-Laplacian.

Fields are piecewise-linear nodal functions on a triangulation.  The module
provides the building blocks of the constrained variational problems: the
mean-zero projection, L^p norms by element quadrature, the gradient energy
``sum_E |grad u|^n |E|``, weak residuals in a lumped dual norm, and the first
nonzero Neumann eigenvalue

    lambda_1 = inf { |grad u|_n^n : mean(u) = 0, |u|_n = 1 },

computed by projected (Sobolev-preconditioned) gradient descent with
renormalization after every step.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass

import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, locate_point, triangle_quadrature

# quadrature degree for non-polynomial integrands (powers, exponentials)
DEFAULT_QUAD_DEGREE = 6


class NonConvergenceError(Exception):
    """Solver failed to reach its tolerance; carries the best iterate."""

    def __init__(self, message, result=None, history=None):
        super().__init__(message)
        self.result = result
        self.history = history or []


@dataclass
class Field:
    """Nodal coefficients of a piecewise-linear function on a mesh."""

    mesh: Mesh
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.mesh.num_nodes,):
            raise ValueError(
                f"coefficient count {self.coeffs.shape} does not match "
                f"node count {self.mesh.num_nodes}"
            )

    def copy(self):
        return Field(self.mesh, self.coeffs.copy())

    def __call__(self, x):
        """P1 interpolation at a point."""
        elem, lam = locate_point(self.mesh, x)
        return float(self.coeffs[self.mesh.elements[elem]] @ lam)


def interpolate(mesh: Mesh, fn) -> Field:
    """Field with nodal values fn(x, y)."""
    return Field(mesh, np.asarray([fn(x, y) for x, y in mesh.nodes], dtype=float))


class Workspace:
    """Cached per-mesh assembly data shared by all operations.

    Holds element gradients, quadrature points in physical coordinates, the
    lumped mass vector (= integrals of the P1 hat functions), the stiffness
    and consistent mass matrices of the linear case, and a factorized
    H^1-type preconditioner.
    """

    _cache = {}

    def __init__(self, mesh, quad_degree=DEFAULT_QUAD_DEGREE):
        self.mesh = mesh
        self.quad = triangle_quadrature(quad_degree)
        self.grads = mesh.element_gradients()  # (M, 3, 2)
        self.areas = mesh.element_volumes  # (M,)
        self.bary = self.quad.points  # (Q, 3)
        self.w = self.quad.weights  # (Q,)
        # physical quadrature points, (M, Q, 2)
        self.xq = np.einsum("qj,mjd->mqd", self.bary, mesh.nodes[mesh.elements])
        # lumped mass: integral of each hat function
        self.lumped = np.bincount(
            mesh.elements.ravel(),
            weights=np.repeat(self.areas / 3.0, 3),
            minlength=mesh.num_nodes,
        )
        self.volume = float(self.areas.sum())
        self._stiffness = None
        self._mass = None
        self._precond = None

    @classmethod
    def of(cls, mesh):
        ws = cls._cache.get(id(mesh))
        if ws is None or ws.mesh is not mesh:
            ws = cls(mesh)
            if len(cls._cache) > 8:
                cls._cache.clear()
            cls._cache[id(mesh)] = ws
        return ws

    def values_at_quad(self, coeffs):
        """Nodal field evaluated at all quadrature points, (M, Q)."""
        return coeffs[self.mesh.elements] @ self.bary.T

    def element_grad(self, coeffs):
        """Constant gradient of the field per element, (M, 2)."""
        return np.einsum("mj,mjd->md", coeffs[self.mesh.elements], self.grads)

    def integrate(self, vals_q):
        """Integral over the mesh of values sampled at quadrature points."""
        return float(np.einsum("mq,q,m->", vals_q, self.w, self.areas))

    def scatter(self, dens_q):
        """Load vector l_i = integral(dens * hat_i) from quad-point samples."""
        contrib = np.einsum("mq,q,qj,m->mj", dens_q, self.w, self.bary, self.areas)
        return np.bincount(
            self.mesh.elements.ravel(), weights=contrib.ravel(), minlength=self.mesh.num_nodes
        )

    def weighted_stiffness_apply(self, weights, coeffs):
        """Action of the weighted stiffness sum_E w_E grad(u).grad(hat_i)|E|."""
        gu = self.element_grad(coeffs)
        flux = (weights * self.areas)[:, None] * gu
        contrib = np.einsum("md,mjd->mj", flux, self.grads)
        return np.bincount(
            self.mesh.elements.ravel(), weights=contrib.ravel(), minlength=self.mesh.num_nodes
        )

    @property
    def stiffness(self):
        """Sparse P1 stiffness matrix of the 2-Laplacian."""
        if self._stiffness is None:
            m = self.mesh
            local = np.einsum("mjd,mkd,m->mjk", self.grads, self.grads, self.areas)
            rows = np.repeat(m.elements, 3, axis=1).ravel()
            cols = np.tile(m.elements, (1, 3)).ravel()
            self._stiffness = sp.csr_matrix(
                (local.ravel(), (rows, cols)), shape=(m.num_nodes, m.num_nodes)
            )
        return self._stiffness

    @property
    def mass(self):
        """Sparse consistent mass matrix."""
        if self._mass is None:
            m = self.mesh
            local = np.einsum("qj,qk,q->jk", self.bary, self.bary, self.w)
            local = local[None, :, :] * self.areas[:, None, None]
            rows = np.repeat(m.elements, 3, axis=1).ravel()
            cols = np.tile(m.elements, (1, 3)).ravel()
            self._mass = sp.csr_matrix(
                (local.ravel(), (rows, cols)), shape=(m.num_nodes, m.num_nodes)
            )
        return self._mass

    @property
    def precond(self):
        """Factorized K + M, the H^1 Riesz map used as descent metric."""
        if self._precond is None:
            self._precond = spla.factorized((self.stiffness + self.mass).tocsc())
        return self._precond


def mean_project(u: Field) -> Field:
    """Remove the mean: u - (1/|Omega|) * integral(u).

    Uses the lumped mass vector, which integrates P1 fields exactly, so the
    projection is idempotent to round-off.
    """
    ws = Workspace.of(u.mesh)
    mean = (ws.lumped @ u.coeffs) / ws.volume
    return Field(u.mesh, u.coeffs - mean)


def field_mean(u: Field) -> float:
    """Exact integral of the P1 field divided by the domain volume."""
    ws = Workspace.of(u.mesh)
    return float((ws.lumped @ u.coeffs) / ws.volume)


def lp_norm(u: Field, p: float) -> float:
    """L^p norm by element-wise quadrature of |u|^p."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    ws = Workspace.of(u.mesh)
    vals = np.abs(ws.values_at_quad(u.coeffs)) ** p
    return ws.integrate(vals) ** (1.0 / p)


def grad_energy(u: Field, n: int) -> float:
    """Gradient energy sum_E |grad u|^n |E| (exact for P1 fields)."""
    ws = Workspace.of(u.mesh)
    gu = ws.element_grad(u.coeffs)
    mag = np.hypot(gu[:, 0], gu[:, 1])
    return float((mag**n) @ ws.areas)


def norm_1alpha(u: Field, n: int, alpha: float) -> float:
    """Constraint norm (|grad u|_n^n - alpha*|u|_n^n)^(1/n) on mean-zero fields.

    Raises ValueError when the radicand is negative (alpha at or above the
    discrete eigenvalue, or a field with nonzero mean).
    """
    g = grad_energy(u, n)
    if alpha == 0:
        return g ** (1.0 / n)
    radicand = g - alpha * lp_norm(u, n) ** n
    if radicand < -1e-13 * max(g, 1.0):
        raise ValueError(
            f"norm radicand negative ({radicand:.3e}): alpha beyond the "
            "discrete eigenvalue or field not mean-zero"
        )
    return max(radicand, 0.0) ** (1.0 / n)


def grad_energy_gradient(u: Field, n: int) -> np.ndarray:
    """Nodal gradient of grad_energy: n * sum_E |grad u|^(n-2) grad u . grad hat_i."""
    ws = Workspace.of(u.mesh)
    if n == 2:
        return 2.0 * (ws.stiffness @ u.coeffs)
    gu = ws.element_grad(u.coeffs)
    mag = np.hypot(gu[:, 0], gu[:, 1])
    return n * ws.weighted_stiffness_apply(mag ** (n - 2), u.coeffs)


def lp_power_gradient(u: Field, p: float) -> np.ndarray:
    """Nodal gradient of integral(|u|^p): p * integral(|u|^(p-2) u hat_i)."""
    ws = Workspace.of(u.mesh)
    if p == 2:
        return 2.0 * (ws.mass @ u.coeffs)
    vals = ws.values_at_quad(u.coeffs)
    dens = p * np.sign(vals) * np.abs(vals) ** (p - 1)
    return ws.scatter(dens)


def dual_norm(residual: np.ndarray, mesh: Mesh) -> float:
    """Lumped dual norm of a load over mean-zero test functions.

    With s = r/m (m the lumped mass) and s_bar its m-weighted mean, returns
    sqrt(sum m * (s - s_bar)^2): the norm of the residual density after
    removing the component that constant shifts of the test function see.
    """
    ws = Workspace.of(mesh)
    s = residual / ws.lumped
    s_bar = (ws.lumped @ s) / ws.volume
    return float(np.sqrt(ws.lumped @ (s - s_bar) ** 2))


def n_laplacian_apply(u: Field, n: int, delta: float = 0.0) -> np.ndarray:
    """Weak n-Laplacian: r_i = sum_E |grad u|^(n-2) grad u . grad hat_i |E|.

    ``delta`` regularizes the degenerate weight as (|grad u|^2+delta^2)^((n-2)/2);
    energies elsewhere stay unregularized.
    """
    ws = Workspace.of(u.mesh)
    gu = ws.element_grad(u.coeffs)
    mag2 = gu[:, 0] ** 2 + gu[:, 1] ** 2
    if n == 2:
        w = np.ones_like(mag2)
    else:
        w = (mag2 + delta**2) ** ((n - 2) / 2.0)
    return ws.weighted_stiffness_apply(w, u.coeffs)


def n_laplacian_residual(u: Field, rhs, n: int) -> float:
    """Dual norm of the weak residual of -div(|grad u|^(n-2) grad u) = rhs.

    ``rhs`` may be a Field (P1 density), a nodal density array, or an
    already-assembled load vector flagged by rhs=("load", vector).
    """
    ws = Workspace.of(u.mesh)
    if isinstance(rhs, tuple) and rhs[0] == "load":
        load = np.asarray(rhs[1], dtype=float)
    else:
        dens = rhs.coeffs if isinstance(rhs, Field) else np.asarray(rhs, dtype=float)
        load = ws.scatter(ws.values_at_quad(dens))
    return dual_norm(n_laplacian_apply(u, n) - load, u.mesh)


@dataclass
class EigResult:
    """First nonzero Neumann eigenvalue with its minimizer."""

    lambda1: float
    eigenfunction: Field
    iterations: int
    residual: float
    converged: bool = True


def neumann_eigenvalue(
    mesh: Mesh,
    n: int,
    tol: float = 1e-7,
    max_iter: int = 5000,
    init: np.ndarray | None = None,
) -> EigResult:
    """Minimize the gradient energy over {mean zero, |u|_n = 1}.

    Projected gradient descent in the H^1 metric: the Euclidean gradient of
    the Lagrangian is mapped through (K + M)^-1, mean-projected, the step is
    chosen by backtracking on the energy, and the iterate is renormalized
    after every step.  The residual is the lumped dual norm of the projected
    gradient; near the round-off floor of the energy a unit fixed-point step
    is taken as long as it still contracts the residual.  Initial guess is
    the first coordinate minus its mean.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    ws = Workspace.of(mesh)

    def normalize(c):
        f = mean_project(Field(mesh, c))
        nn = lp_norm(f, n)
        if nn == 0:
            raise ValueError("cannot normalize the zero field")
        return f.coeffs / nn

    def kkt_residual(c):
        g = grad_energy_gradient(Field(mesh, c), n)
        lam = grad_energy(Field(mesh, c), n)
        c_grad = lp_power_gradient(Field(mesh, c), n)  # gradient of |u|_n^n
        # KKT combination g - lambda*c_grad; constants drop inside dual_norm
        kkt = g - lam * c_grad
        return kkt, lam, dual_norm(kkt, mesh)

    def subspace_step(u, d):
        """Exact Rayleigh minimizer over span{u, d} for the quadratic case."""
        from scipy.linalg import eigh as dense_eigh

        K, M = ws.stiffness, ws.mass
        basis = np.column_stack([u, d / max(np.linalg.norm(d), 1e-300)])
        Kb = K @ basis
        Mb = M @ basis
        A = basis.T @ Kb
        B = basis.T @ Mb
        try:
            vals, vecs = dense_eigh(A, B)
        except np.linalg.LinAlgError:
            return None
        c = vecs[:, 0]
        return basis @ c

    if init is None:
        init = mesh.nodes[:, 0].copy()
    u = normalize(np.asarray(init, dtype=float))
    kkt, energy, res = kkt_residual(u)
    step = 1.0
    for it in range(1, max_iter + 1):
        if res <= tol:
            return EigResult(energy, Field(mesh, u), it - 1, res)
        d = ws.precond(kkt)
        d = d - (ws.lumped @ d) / ws.volume  # mean-zero search direction
        accepted = False
        if n == 2:
            cand = subspace_step(u, d)
            if cand is not None:
                cand = normalize(cand)
                cand_kkt, cand_energy, cand_res = kkt_residual(cand)
                if cand_energy <= energy + 1e-13 * max(1.0, abs(energy)) and cand_res < res:
                    u, kkt, energy, res = cand, cand_kkt, cand_energy, cand_res
                    accepted = True
            if accepted:
                continue
        slack = 1e-13 * max(1.0, abs(energy))
        trial_step = step
        for _ in range(40):
            cand = normalize(u - trial_step * d)
            cand_energy = grad_energy(Field(mesh, cand), n)
            if cand_energy < energy - slack:
                u = cand
                kkt, energy, res = kkt_residual(u)
                accepted = True
                step = min(trial_step * 1.3, 1e3)
                break
            trial_step *= 0.5
        if not accepted:
            # energy is converged to round-off; pure fixed-point steps keep
            # contracting the gradient residual of the quadratic-like problem
            cand = normalize(u - d)
            cand_kkt, cand_energy, cand_res = kkt_residual(cand)
            if cand_res < res:
                u, kkt, energy, res = cand, cand_kkt, cand_energy, cand_res
                step = 1.0
            else:
                break
    result = EigResult(energy, Field(mesh, u), max_iter, res, converged=False)
    raise NonConvergenceError(
        f"eigenvalue descent stalled at residual {res:.3e} (tol {tol:.3e})",
        result=result,
    )


def linear_neumann_eigenvalue(mesh: Mesh, k: int = 1) -> float:
    """Oracle for n = 2: smallest nonzero generalized eigenvalue of (K, M).

    Shift-invert Lanczos around a negative shift captures the zero mode and
    the leading nonzero modes; deterministic via a fixed start vector.
    """
    ws = Workspace.of(mesh)
    K = ws.stiffness.tocsc()
    M = ws.mass.tocsc()
    v0 = np.cos(np.arange(mesh.num_nodes) * 0.7) + 0.1
    vals = spla.eigsh(
        K, k=k + 2, M=M, sigma=-1.0, which="LM", v0=v0, return_eigenvectors=False
    )
    vals = np.sort(vals)
    nonzero = vals[vals > 1e-8 * max(1.0, vals[-1])]
    return float(nonzero[k - 1])
