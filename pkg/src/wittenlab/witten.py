"""Matrix-free Witten Laplacians on zero and one forms, and the projected
conjugate-gradient solvers built on them.

All linear algebra happens in the symmetric half-density picture
(unweighted L^2): W0 = -Lap + |grad Phi|^2/4 - Lap Phi/2 acting on
functions, W1 = W0 (x) I + Hess Phi acting componentwise on vector fields.
Weighted-picture quantities enter and leave only through the exp(+-Phi/2)
dictionary. The box carries Dirichlet-0 ghost values, which is accurate
because every physical field decays like exp(-Phi/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import (ConvergenceError, DefinitenessError, EmptyMaskError,
                     InvalidParameterError, ShapeMismatchError)
from .grid import (GridSpec, OneFormField, ScalarField, coords, default_grid,
                   gibbs_mask, ground_density, one_form_from_stack,
                   quad_weights)
from .potential import Observable, PotentialModel, default_convexity_margin


@dataclass(frozen=True)
class SolverConfig:
    rel_tolerance: float = 1e-8
    max_iterations: int | None = None       # None -> 10 * sqrt(N)
    preconditioner: str = "diagonal"        # "none" or "diagonal"
    seed: int = 7

    def __post_init__(self):
        if not (0 < self.rel_tolerance < 1):
            raise InvalidParameterError("rel_tolerance must be in (0, 1)")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise InvalidParameterError("max_iterations must be >= 1")
        if self.preconditioner not in ("none", "diagonal"):
            raise InvalidParameterError(
                f"unknown preconditioner {self.preconditioner!r}")

    def iteration_cap(self, n_points: int) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        return int(10 * math.sqrt(n_points)) + 10


@dataclass
class SolveReport:
    iterations: int
    final_relative_residual: float
    converged: bool
    rayleigh_quotient_min_observed: float

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "final_relative_residual": self.final_relative_residual,
            "converged": self.converged,
            "rayleigh_quotient_min_observed": self.rayleigh_quotient_min_observed,
        }


def _check_binding(model: PotentialModel, grid: GridSpec):
    if grid.lattice != model.lattice:
        raise ShapeMismatchError("field grid is bound to a different lattice")


@lru_cache(maxsize=16)
def _xc(grid: GridSpec) -> np.ndarray:
    """Node coordinates as a contiguous (n, N) component stack."""
    return np.ascontiguousarray(coords(grid).T)


@lru_cache(maxsize=16)
def potential_term(model: PotentialModel, grid: GridSpec) -> np.ndarray:
    """|grad Phi|^2/4 - Lap Phi/2 evaluated analytically at the nodes."""
    x = coords(grid)
    g = model.grad(x)
    return 0.25 * np.sum(g * g, axis=-1) - 0.5 * model.phi_laplacian(x)


@lru_cache(maxsize=16)
def _hess_diag(model: PotentialModel, grid: GridSpec) -> np.ndarray:
    """Diagonal Hess_ii(x) per component, shape (n, N)."""
    xc = _xc(grid)
    apply_h = model.hess_apply_on(xc)
    n, N = xc.shape
    out = np.empty((n, N))
    basis = np.zeros((n, N))
    for i in range(n):
        basis[i] = 1.0
        out[i] = apply_h(basis)[i]
        basis[i] = 0.0
    return out


STENCIL_ORDER = 4


def apply_w0(model: PotentialModel, u: ScalarField) -> ScalarField:
    """-Lap u + (|grad Phi|^2/4 - Lap Phi/2) u.

    The Laplacian here is the solver-grade 5-point-per-axis stencil
    (fourth order in the interior); the acceptance tolerances on solved
    fields are not reachable with the plain 3-point scheme.
    """
    _check_binding(model, u.grid)
    g = u.grid
    pot = potential_term(model, g)
    out = kernels.w0_apply(u.values, pot, g.n_sites, g.points_per_site,
                           1.0 / g.spacing ** 2, order=STENCIL_ORDER)
    return ScalarField(g, out)


def _w0_raw(model: PotentialModel, grid: GridSpec):
    pot = potential_term(model, grid)
    n, m = grid.n_sites, grid.points_per_site
    inv_h2 = 1.0 / grid.spacing ** 2

    def apply(u):
        return kernels.w0_apply(u, pot, n, m, inv_h2, order=STENCIL_ORDER)

    return apply


def _w1_raw(model: PotentialModel, grid: GridSpec):
    """Componentwise W0 plus the pointwise Hessian matvec, on (n, N) stacks."""
    pot = potential_term(model, grid)
    hess_apply = model.hess_apply_on(_xc(grid))
    n, m = grid.n_sites, grid.points_per_site
    inv_h2 = 1.0 / grid.spacing ** 2

    def apply(V):
        out = hess_apply(V)
        for i in range(n):
            out[i] += kernels.w0_apply(V[i], pot, n, m, inv_h2,
                                       order=STENCIL_ORDER)
        return out

    return apply


def apply_w1(model: PotentialModel, V: OneFormField) -> OneFormField:
    _check_binding(model, V.grid)
    out = _w1_raw(model, V.grid)(V.stack())
    return one_form_from_stack(V.grid, out)


def _cg(apply_op, rhs, tol, max_iter, precond=None, project=None):
    """Plain (optionally projected, optionally Jacobi) conjugate gradients.

    Raises DefinitenessError when a search direction has a nonpositive
    Rayleigh quotient; otherwise always returns (x, SolveReport) and lets
    the caller decide about non-convergence.
    """
    x = np.zeros_like(rhs)
    r = rhs.copy()
    if project is not None:
        r = project(r)
    rhs_norm = float(np.linalg.norm(r))
    if rhs_norm == 0.0:
        return x, SolveReport(0, 0.0, True, math.inf)

    def z_of(res):
        if precond is None:
            return res
        z = precond(res)
        return project(z) if project is not None else z

    z = z_of(r)
    p = z.copy()
    rz = float(np.vdot(r, z))
    ray_min = math.inf
    res = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        Ap = apply_op(p)
        if project is not None:
            Ap = project(Ap)
        pAp = float(np.vdot(p, Ap))
        ray = pAp / float(np.vdot(p, p))
        ray_min = min(ray_min, ray)
        if pAp <= 0.0:
            raise DefinitenessError(
                f"nonpositive Rayleigh quotient {ray:.3e} during CG")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if project is not None:
            r = project(r)
        res = float(np.linalg.norm(r)) / rhs_norm
        if res <= tol:
            return x, SolveReport(it, res, True, ray_min)
        z = z_of(r)
        rz_new = float(np.vdot(r, z))
        beta = rz_new / rz
        p = z + beta * p
        rz = rz_new
    return x, SolveReport(it, res, False, ray_min)


def require_converged(report: SolveReport):
    if not report.converged:
        raise ConvergenceError(
            f"solver stalled at relative residual {report.final_relative_residual:.3e} "
            f"after {report.iterations} iterations")


def solve_w1(model: PotentialModel, rhs: OneFormField,
             cfg: SolverConfig = SolverConfig()) -> tuple[OneFormField, SolveReport]:
    """Solve W1 V = rhs by conjugate gradients.

    Positive definiteness is backed by the sampled convexity margin of the
    Hessian; a nonpositive margin (or a nonpositive Rayleigh quotient seen
    during the iteration) raises DefinitenessError.
    """
    _check_binding(model, rhs.grid)
    grid = rhs.grid
    if default_convexity_margin(model) <= 0:
        raise DefinitenessError("sampled convexity margin is not positive; "
                                "W1 may be indefinite")
    op = _w1_raw(model, grid)
    precond = None
    if cfg.preconditioner == "diagonal":
        diag = (2.0 * grid.n_sites / grid.spacing ** 2
                + potential_term(model, grid)[None, :] + _hess_diag(model, grid))
        inv_diag = 1.0 / diag
        precond = lambda r: inv_diag * r
    V, report = _cg(op, rhs.stack(), cfg.rel_tolerance,
                    cfg.iteration_cap(grid.total_points), precond=precond)
    return one_form_from_stack(grid, V), report


def solve_zero_form(model: PotentialModel, g: Observable,
                    cfg: SolverConfig = SolverConfig(),
                    grid: GridSpec | None = None
                    ) -> tuple[ScalarField, SolveReport]:
    """Solve (-Lap + grad Phi . grad) f = g - <g>, <f> = 0.

    Works on u = f exp(-Phi/2): W0 u = (g - <g>) exp(-Phi/2), with the CG
    iteration projected onto the orthogonal complement of the ground
    density (the kernel of W0). The returned f carries values only on the
    region where exp(-Phi) is at least the mask floor; outside it is NaN.
    """
    if grid is None:
        grid = default_grid(model.lattice)
    _check_binding(model, grid)
    ground = ground_density(grid, model)
    phi0 = ground.field.values
    w = quad_weights(grid)
    gvals = g.value(coords(grid))
    gibbs_mean = float(np.sum(w * gvals * phi0 * phi0)) / ground.norm_sq
    rhs = (gvals - gibbs_mean) * phi0

    unit = phi0 / np.linalg.norm(phi0)

    def project(v):
        return v - np.dot(unit, v) * unit

    op = _w0_raw(model, grid)
    precond = None
    if cfg.preconditioner == "diagonal":
        inv_diag = 1.0 / (2.0 * grid.n_sites / grid.spacing ** 2
                          + potential_term(model, grid))
        precond = lambda r: inv_diag * r
    u, report = _cg(op, rhs, cfg.rel_tolerance,
                    cfg.iteration_cap(grid.total_points),
                    precond=precond, project=project)

    # pin the weighted mean of f = u exp(Phi/2) to zero exactly
    c = float(np.sum(w * u * phi0)) / ground.norm_sq
    u = u - c * phi0

    mask = gibbs_mask(model, grid)
    if not mask.any():
        raise EmptyMaskError("no grid node carries Gibbs weight above the floor")
    f = np.full(grid.total_points, np.nan)
    f[mask] = u[mask] / phi0[mask]
    return ScalarField(grid, f, masked=True), report


def interior_mask(grid: GridSpec) -> np.ndarray:
    """True on nodes not touching any box face."""
    m, n = grid.points_per_site, grid.n_sites
    one = np.zeros(m, dtype=bool)
    one[1:-1] = True
    out = np.ones((m,) * n, dtype=bool)
    for ax in range(n):
        shape = [1] * n
        shape[ax] = m
        out &= one.reshape(shape)
    return out.reshape(-1)


def spectral_gap_probe(model: PotentialModel, trials: int,
                       cfg: SolverConfig = SolverConfig(),
                       grid: GridSpec | None = None) -> float:
    """Refined minimum Rayleigh quotient of W1 over random probes.

    Random interior-supported one-forms are pushed toward the bottom of the
    spectrum by a few inverse iterations (each an inner CG solve); the
    returned minimum is an upper bound on the true spectral bottom.
    """
    if trials < 1:
        raise InvalidParameterError("spectral_gap_probe needs trials >= 1")
    if grid is None:
        grid = default_grid(model.lattice)
    _check_binding(model, grid)
    rng = np.random.default_rng(cfg.seed)
    op = _w1_raw(model, grid)
    inner = interior_mask(grid)
    n = grid.n_sites

    def quotient(V):
        return float(np.vdot(V, op(V)) / np.vdot(V, V))

    best = math.inf
    best_V = None
    for _ in range(trials):
        V = rng.standard_normal((n, grid.total_points)) * inner[None, :]
        q = quotient(V)
        if q < best:
            best, best_V = q, V

    loose = SolverConfig(rel_tolerance=1e-6, preconditioner=cfg.preconditioner,
                         seed=cfg.seed)
    V = best_V
    for _ in range(6):
        form = one_form_from_stack(grid, V / np.linalg.norm(V))
        sol, rep = solve_w1(model, form, loose)
        V = sol.stack()
        best = min(best, quotient(V))
    return best
