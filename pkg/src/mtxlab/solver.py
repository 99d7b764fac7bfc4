"""Subcritical extremals of the exponential functional.

Maximizes ``integral(exp(beta_eps * |u|^(n/(n-1))))`` over the discrete
manifold {mean(u) = 0, norm_1alpha(u) = 1} by projected gradient ascent with
renormalization after every step, extracts the stationarity multipliers, and
runs the continuation toward the critical exponent beta_n.

The ascent direction is the H^1-preconditioned stationarity residual; a step
is accepted only when the functional strictly increases, so warm-started
continuations produce an exactly nondecreasing value curve.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass, field

from .constants import EXP_CAP, sharp_constants
from .fem import (
    Field,
    NonConvergenceError,
    Workspace,
    dual_norm,
    grad_energy,
    lp_norm,
    mean_project,
    n_laplacian_apply,
    neumann_eigenvalue,
    norm_1alpha,
)
from .mesh import Mesh


class ExponentOverflowError(Exception):
    """An iterate drove the exponential integrand past the overflow guard."""

    def __init__(self, message, max_exponent=None):
        super().__init__(message)
        self.max_exponent = max_exponent


@dataclass(frozen=True)
class SubcriticalProblem:
    """Reduced-exponent maximization problem on a fixed mesh.

    ``epsilon`` in (0, beta_n) sets the working exponent
    beta_eps = beta_n - epsilon; ``alpha`` must stay below the first nonzero
    Neumann eigenvalue of the mesh (checked by the caller or via
    ``validate_alpha``).
    """

    mesh: Mesh
    n: int
    alpha: float
    epsilon: float

    def __post_init__(self):
        beta_n = sharp_constants(self.n).beta_n
        if not 0.0 < self.epsilon < beta_n:
            raise ValueError(
                f"epsilon must lie in (0, beta_n={beta_n:.6g}), got {self.epsilon}"
            )
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")

    @property
    def beta_n(self):
        return sharp_constants(self.n).beta_n

    @property
    def beta_eps(self):
        return self.beta_n - self.epsilon

    def validate_alpha(self, tol=1e-4):
        lam1 = neumann_eigenvalue(self.mesh, self.n, tol=tol).lambda1
        if self.alpha >= lam1:
            raise ValueError(
                f"alpha={self.alpha} is not below the discrete eigenvalue {lam1:.6g}"
            )
        return lam1


@dataclass
class SolverOptions:
    tol: float = 1e-6
    max_iter: int = 4000
    step0: float = 0.5
    verbose: bool = False


@dataclass
class MaximizerResult:
    """Converged subcritical extremal with its multipliers and diagnostics."""

    u: Field
    C_eps: float
    lambda_eps: float
    mu_eps: float
    nu_eps: float
    c_eps: float
    x_eps: np.ndarray
    el_residual: float
    iterations: int
    epsilon: float
    beta_eps: float
    converged: bool = True

    def to_record(self):
        return {
            "epsilon": self.epsilon,
            "beta_eps": self.beta_eps,
            "C_eps": self.C_eps,
            "lambda_eps": self.lambda_eps,
            "mu_eps": self.mu_eps,
            "nu_eps": self.nu_eps,
            "c_eps": self.c_eps,
            "x_eps": [float(v) for v in self.x_eps],
            "el_residual": self.el_residual,
            "iterations": self.iterations,
            "converged": self.converged,
        }


def _exp_values(ws, coeffs, beta, n):
    """exp(beta*|u|^p) at quadrature points with the overflow guard."""
    vals = ws.values_at_quad(coeffs)
    expo = beta * np.abs(vals) ** (n / (n - 1.0))
    mx = float(expo.max()) if expo.size else 0.0
    if mx > EXP_CAP:
        raise ExponentOverflowError(
            f"exponent reached {mx:.1f} > {EXP_CAP}; iterate is blowing up "
            "beyond double precision",
            max_exponent=mx,
        )
    return vals, np.exp(expo)


def mt_functional(u: Field, beta: float, n: int) -> float:
    """Exponential functional integral(exp(beta*|u|^(n/(n-1)))) by quadrature."""
    ws = Workspace.of(u.mesh)
    _, ev = _exp_values(ws, u.coeffs, beta, n)
    return ws.integrate(ev)


def mt_gradient(u: Field, beta: float, n: int) -> np.ndarray:
    """Nodal gradient of mt_functional.

    Density beta*(n/(n-1)) * exp(beta*|u|^p) * |u|^(1/(n-1)) * sign(u) with
    p = n/(n-1), scattered against the hat functions.
    """
    ws = Workspace.of(u.mesh)
    vals, ev = _exp_values(ws, u.coeffs, beta, n)
    dens = beta * (n / (n - 1.0)) * ev * np.sign(vals) * np.abs(vals) ** (1.0 / (n - 1.0))
    return ws.scatter(dens)


def multipliers(u: Field, problem: SubcriticalProblem):
    """Stationarity integrals (lambda_eps, mu_eps, nu_eps) of the iterate.

    lambda = integral(e*|u|^p), mu = mean of e*|u|^(1/(n-1))*sign(u),
    nu = mean of |u|^(n-2)*u, all with p = n/(n-1) and
    e = exp(beta_eps*|u|^p); the mu/nu densities are continuous at u = 0.
    """
    n = problem.n
    ws = Workspace.of(u.mesh)
    vals, ev = _exp_values(ws, u.coeffs, problem.beta_eps, n)
    absu = np.abs(vals)
    p = n / (n - 1.0)
    lam = ws.integrate(ev * absu**p)
    mu = ws.integrate(ev * np.sign(vals) * absu ** (1.0 / (n - 1.0))) / ws.volume
    nu = ws.integrate(np.sign(vals) * absu ** (n - 1.0)) / ws.volume
    return lam, mu, nu


def _alpha_load(ws, coeffs, n):
    """Load vector of the density |u|^(n-2)*u."""
    vals = ws.values_at_quad(coeffs)
    return ws.scatter(np.sign(vals) * np.abs(vals) ** (n - 1.0))


def el_residual_vector(u: Field, problem: SubcriticalProblem, mults=None):
    """Weak stationarity residual of the extremal equation.

    R_i = <|grad u|^(n-2) grad u, grad hat_i>
          - integral([(1/lambda)*e*|u|^(1/(n-1))*sign(u) + alpha*|u|^(n-2)*u
                      - (mu + alpha*lambda*nu)/lambda] * hat_i),
    assembled with the shared quadrature so that the integral identities of
    the multipliers hold to round-off.
    """
    n = problem.n
    ws = Workspace.of(u.mesh)
    if mults is None:
        mults = multipliers(u, problem)
    lam, mu, nu = mults
    vals, ev = _exp_values(ws, u.coeffs, problem.beta_eps, n)
    dens = ev * np.sign(vals) * np.abs(vals) ** (1.0 / (n - 1.0)) / lam
    rhs = ws.scatter(dens)
    if problem.alpha != 0.0:
        rhs = rhs + problem.alpha * _alpha_load(ws, u.coeffs, n)
    rhs = rhs - (mu + problem.alpha * lam * nu) / lam * ws.lumped
    return n_laplacian_apply(u, n) - rhs


def el_residual(result: MaximizerResult, problem: SubcriticalProblem) -> float:
    """Dual norm of the stationarity residual of a computed maximizer."""
    return dual_norm(el_residual_vector(result.u, problem), result.u.mesh)


def normalize_constraint(u: Field, n: int, alpha: float) -> Field:
    """Project to mean zero and rescale to unit constraint norm."""
    v = mean_project(u)
    nrm = norm_1alpha(v, n, alpha)
    if nrm == 0:
        raise ValueError("cannot normalize a field with vanishing norm")
    return Field(v.mesh, v.coeffs / nrm)


def default_init(problem: SubcriticalProblem, seed: int = 0, eigenfunction=None) -> Field:
    """Feasible start: first eigenfunction plus a boundary bump plus noise.

    The bump is a Gaussian profile centered at a boundary node selected by
    the seed; symmetric starts tend to stall on interior saddles, and the
    maximizers of interest concentrate at the boundary.
    """
    mesh = problem.mesh
    if eigenfunction is None:
        eigenfunction = neumann_eigenvalue(mesh, problem.n, tol=1e-5).eigenfunction
    rng = np.random.default_rng(seed)
    bidx = mesh.boundary_nodes
    center = mesh.nodes[bidx[int(rng.integers(len(bidx)))]]
    scale = 0.25 * np.sqrt(Workspace.of(mesh).volume)
    d2 = ((mesh.nodes - center) ** 2).sum(axis=1)
    bump = np.exp(-d2 / (2.0 * scale**2))
    base = normalize_constraint(eigenfunction, problem.n, problem.alpha)
    mix = Field(mesh, base.coeffs + bump + 0.01 * rng.standard_normal(mesh.num_nodes))
    return normalize_constraint(mix, problem.n, problem.alpha)


def maximize(
    problem: SubcriticalProblem,
    init: Field | None = None,
    opts: SolverOptions | None = None,
) -> MaximizerResult:
    """Projected gradient ascent on the constraint manifold.

    Each iteration preconditions the stationarity residual through the H^1
    Riesz map, takes an ascent step, re-projects to mean zero, and rescales
    to unit constraint norm; steps are accepted only when the functional
    strictly increases.  Terminates when the dual norm of the stationarity
    residual drops below ``opts.tol``; non-convergence raises
    NonConvergenceError carrying the best iterate.
    """
    opts = opts or SolverOptions()
    n, beta = problem.n, problem.beta_eps
    ws = Workspace.of(problem.mesh)
    if init is None:
        init = default_init(problem)
    u = normalize_constraint(init, n, problem.alpha)
    value = mt_functional(u, beta, n)
    res = np.inf
    iterations = 0
    # limited-memory quasi-Newton state; the stationarity residual plays the
    # role of the gradient of the negated functional on the manifold
    pairs = []
    g_prev = None
    u_prev = None

    def two_loop(g):
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        r = ws.precond(q)
        if pairs:
            s, y, rho = pairs[-1]
            gamma = (s @ y) / max(y @ ws.precond(y), 1e-300)
            r *= gamma
        for (s, y, rho), a in zip(pairs, reversed(alphas)):
            b = rho * (y @ r)
            r += (a - b) * s
        return r

    for it in range(1, opts.max_iter + 1):
        iterations = it
        mults = multipliers(u, problem)
        g = el_residual_vector(u, problem, mults)
        res = dual_norm(g, u.mesh)
        if opts.verbose and it % 25 == 0:
            print(f"  iter {it}: value {value:.9g} residual {res:.3e}")
        if res <= opts.tol:
            return _finalize(u, value, mults, res, it - 1, problem)
        if u_prev is not None:
            s = u.coeffs - u_prev
            y = g - g_prev
            sy = s @ y
            if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
                pairs.append((s, y, 1.0 / sy))
                if len(pairs) > 12:
                    pairs.pop(0)
        u_prev, g_prev = u.coeffs.copy(), g.copy()
        # the residual is -1/(n*theta) times the ascent gradient of the
        # Lagrangian (theta = beta*lambda/(n-1) > 0), so step against it
        d = -two_loop(g)
        d = d - (ws.lumped @ d) / ws.volume
        if g @ d >= 0:  # quasi-Newton model lost ascent; restart the memory
            pairs.clear()
            d = -ws.precond(g)
            d = d - (ws.lumped @ d) / ws.volume
        accepted = False
        trial = 1.0
        for _ in range(60):
            try:
                cand = normalize_constraint(Field(u.mesh, u.coeffs + trial * d), n, problem.alpha)
                cand_value = mt_functional(cand, beta, n)
            except (ExponentOverflowError, ValueError):
                trial *= 0.25
                continue
            if cand_value > value:
                u, value = cand, cand_value
                accepted = True
                break
            trial *= 0.5
        if not accepted:
            if pairs:
                pairs.clear()  # retry once with the plain preconditioned step
                u_prev = g_prev = None
                continue
            break
    mults = multipliers(u, problem)
    res = dual_norm(el_residual_vector(u, problem, mults), u.mesh)
    best = _finalize(u, value, mults, res, iterations, problem, converged=res <= opts.tol)
    if best.converged:
        return best
    raise NonConvergenceError(
        f"ascent stalled at residual {res:.3e} (tol {opts.tol:.3e}) "
        f"after {iterations} iterations",
        result=best,
    )


def _finalize(u, value, mults, res, iterations, problem, converged=True):
    coeffs = u.coeffs
    imax = int(np.argmax(np.abs(coeffs)))
    if coeffs[imax] < 0:  # the functional is even; fix the peak sign
        coeffs = -coeffs
        u = Field(u.mesh, coeffs)
        lam, mu, nu = mults
        mults = (lam, -mu, -nu)  # odd densities flip with u
    lam, mu, nu = mults
    return MaximizerResult(
        u=u,
        C_eps=value,
        lambda_eps=lam,
        mu_eps=mu,
        nu_eps=nu,
        c_eps=float(coeffs[imax]),
        x_eps=u.mesh.nodes[imax].copy(),
        el_residual=res,
        iterations=iterations,
        epsilon=problem.epsilon,
        beta_eps=problem.beta_eps,
        converged=converged,
    )


def continuation(
    mesh: Mesh,
    n: int,
    alpha: float,
    epsilons,
    opts: SolverOptions | None = None,
    seed: int = 0,
):
    """Warm-started sweep over a decreasing epsilon schedule.

    Each problem starts from the previous maximizer (the feasible set does
    not depend on epsilon), so the value curve is nondecreasing by
    construction.  Failures are recorded with their best iterate and the
    sweep continues from the last success.
    """
    epsilons = list(epsilons)
    if any(e2 >= e1 for e1, e2 in zip(epsilons, epsilons[1:])):
        raise ValueError("epsilon schedule must be strictly decreasing")
    results = []
    init = None
    eig = neumann_eigenvalue(mesh, n, tol=1e-5).eigenfunction
    for eps in epsilons:
        problem = SubcriticalProblem(mesh, n, alpha, eps)
        if init is None:
            init = default_init(problem, seed=seed, eigenfunction=eig)
        try:
            result = maximize(problem, init=init, opts=opts)
        except NonConvergenceError as err:
            result = err.result
        results.append(result)
        if result.converged:
            init = result.u
    return results


def concentration_threshold(norm_of_weak_limit: float, n: int) -> float:
    """Admissible exponent multiple 1/(1 - t^n)^(1/(n-1)) below which the
    exponential stays integrable along weakly convergent unit sequences."""
    t = norm_of_weak_limit
    if not 0.0 <= t < 1.0:
        raise ValueError(f"norm of the weak limit must lie in [0, 1), got {t}")
    if n < 2:
        raise ValueError(f"dimension must be >= 2, got {n}")
    return (1.0 - t**n) ** (-1.0 / (n - 1.0))
