import numpy as np
import pytest

from wittenlab.errors import (DefinitenessError, InvalidParameterError,
                              ShapeMismatchError)
from wittenlab.grid import (ScalarField, build_grid, coords,
                            gibbs_mask, ground_density,
                            one_form_from_stack, quad_weights, sample_scalar)
from wittenlab.lattice import build_lattice
from wittenlab.potential import (coordinate_observable, gaussian_potential,
                                 kac_potential, linear_observable)
from wittenlab.witten import (SolverConfig, apply_w0, apply_w1,
                              interior_mask, solve_w1, solve_zero_form,
                              spectral_gap_probe)


def stack_form(grid, arr):
    return one_form_from_stack(grid, np.asarray(arr, dtype=float))


# ------------------------------------------------------------- application

def test_w0_annihilates_ground(kac2, grid2_33):
    gd = ground_density(grid2_33, kac2)
    out = apply_w0(kac2, gd.field)
    h2 = grid2_33.spacing ** 2
    assert np.abs(out.values).max() < h2


def test_w0_oscillator_first_excited(lat1):
    lat = build_lattice(1, [1])
    model = gaussian_potential(lat)
    g = build_grid(lat, 6.0, 129)
    x = coords(g)[:, 0]
    u = ScalarField(g, x * np.exp(-x * x / 4))
    out = apply_w0(model, u)
    inner = np.abs(x) < 4
    assert np.abs(out.values - u.values)[inner].max() < 1e-4


def test_w0_eigenvalue_additivity(gauss2, grid2_65):
    x = coords(grid2_65)
    u = ScalarField(grid2_65, x[:, 0] * x[:, 1] * np.exp(-np.sum(x * x, 1) / 4))
    out = apply_w0(gauss2, u)
    inner = np.max(np.abs(x), axis=1) < 4
    assert np.abs(out.values - 2 * u.values)[inner].max() < 1e-3


def test_w1_gaussian_adds_identity(gauss2, grid2_33, rng):
    V = rng.standard_normal((2, grid2_33.total_points))
    form = stack_form(grid2_33, V)
    w1 = apply_w1(gauss2, form).stack()
    w0 = np.stack([apply_w0(gauss2, ScalarField(grid2_33, V[i])).values
                   for i in range(2)])
    assert np.allclose(w1, w0 + V, atol=1e-12)


def test_w1_ground_times_basis_eigen(gauss2, grid2_65):
    gd = ground_density(grid2_65, gauss2)
    V = np.zeros((2, grid2_65.total_points))
    V[0] = gd.field.values
    out = apply_w1(gauss2, stack_form(grid2_65, V)).stack()
    x = coords(grid2_65)
    inner = np.max(np.abs(x), axis=1) < 4
    assert np.abs(out[0] - V[0])[inner].max() < 1e-4
    assert np.abs(out[1]).max() < 1e-12


@pytest.mark.parametrize("model_name", ["gauss", "kac"])
def test_w_operators_symmetric(model_name, lat2, grid2_33, rng):
    model = gaussian_potential(lat2) if model_name == "gauss" \
        else kac_potential(lat2, 0.05)
    inner = interior_mask(grid2_33).astype(float)
    a = rng.standard_normal((2, grid2_33.total_points)) * inner
    b = rng.standard_normal((2, grid2_33.total_points)) * inner
    wa = apply_w1(model, stack_form(grid2_33, a)).stack()
    wb = apply_w1(model, stack_form(grid2_33, b)).stack()
    d1, d2 = float(np.vdot(wa, b)), float(np.vdot(a, wb))
    assert abs(d1 - d2) <= 1e-10 * max(1.0, abs(d1))
    ua = ScalarField(grid2_33, a[0])
    ub = ScalarField(grid2_33, b[0])
    s1 = float(np.vdot(apply_w0(model, ua).values, b[0]))
    s2 = float(np.vdot(a[0], apply_w0(model, ub).values))
    assert abs(s1 - s2) <= 1e-10 * max(1.0, abs(s1))


def test_w0_positive_semidefinite(kac2, grid2_33, rng):
    for _ in range(5):
        u = rng.standard_normal(grid2_33.total_points)
        uf = ScalarField(grid2_33, u)
        q = float(np.vdot(apply_w0(kac2, uf).values, u))
        assert q >= -1e-8 * float(np.vdot(u, u))


def test_w1_bounded_below_by_margin(kac2, grid2_33, rng):
    from wittenlab.potential import default_convexity_margin
    margin = default_convexity_margin(kac2)
    h2 = grid2_33.spacing ** 2
    for _ in range(5):
        V = rng.standard_normal((2, grid2_33.total_points))
        q = float(np.vdot(apply_w1(kac2, stack_form(grid2_33, V)).stack(), V))
        assert q >= (margin - h2) * float(np.vdot(V, V))


def test_conjugation_identity(kac2, grid2_33):
    """exp(-Phi/2) (A0 f) matches W0(exp(-Phi/2) f) on the mask for a
    polynomial f (the unitary dictionary)."""
    gd = ground_density(grid2_33, kac2)
    x = coords(grid2_33)
    f = x[:, 0] ** 2 + 0.5 * x[:, 1]
    grad_f = np.stack([2 * x[:, 0], np.full(len(x), 0.5)])
    lap_f = np.full(len(x), 2.0)
    a0f = -lap_f + np.sum(kac2.grad(x).T * grad_f, axis=0)
    lhs = gd.field.values * a0f
    rhs = apply_w0(kac2, ScalarField(grid2_33, gd.field.values * f)).values
    mask = gibbs_mask(kac2, grid2_33)
    strong = gd.field.values ** 2 >= 1e-4
    h2 = grid2_33.spacing ** 2
    assert np.abs(lhs - rhs)[strong].max() < 5 * h2


def test_grid_lattice_binding_checked(lat3, kac2):
    g3 = build_grid(lat3, 6.0, 9)
    u = sample_scalar(g3, lambda x: np.ones(len(x)))
    with pytest.raises(ShapeMismatchError):
        apply_w0(kac2, u)


# ------------------------------------------------------------------ solves

def test_solve_w1_gaussian_fixed_point(gauss2, grid2_33, solver):
    gd = ground_density(grid2_33, gauss2)
    rhs = np.zeros((2, grid2_33.total_points))
    rhs[0] = gd.field.values
    V, rep = solve_w1(gauss2, stack_form(grid2_33, rhs), solver)
    assert rep.converged
    assert rep.final_relative_residual <= solver.rel_tolerance
    err = np.abs(V.stack() - rhs).max()
    assert err < 5e-4


def test_solve_w1_zero_rhs(kac2, grid2_33, solver):
    V, rep = solve_w1(kac2, stack_form(
        grid2_33, np.zeros((2, grid2_33.total_points))), solver)
    assert rep.iterations == 0
    assert rep.converged
    assert np.all(V.stack() == 0.0)


def test_solve_w1_reproduces_rhs(kac2, grid2_33, solver, rng):
    """apply_w1 of the solution returns the rhs within the residual."""
    rhs = rng.standard_normal((2, grid2_33.total_points))
    rhs *= interior_mask(grid2_33)
    V, rep = solve_w1(kac2, stack_form(grid2_33, rhs), solver)
    assert rep.converged
    back = apply_w1(kac2, V).stack()
    rel = np.linalg.norm(back - rhs) / np.linalg.norm(rhs)
    assert rel <= 2 * rep.final_relative_residual


def test_solve_w1_definiteness_guard(lat2, kac2, grid2_33, solver):
    """A tilt far past the convexity bound must be rejected."""
    from wittenlab.potential import square_observable, tilt_potential
    bad = tilt_potential(kac2, square_observable(lat2, 0), 2.0, force=True)
    gd = ground_density(grid2_33, bad)
    rhs = np.zeros((2, grid2_33.total_points))
    rhs[0] = gd.field.values
    with pytest.raises(DefinitenessError):
        solve_w1(bad, stack_form(grid2_33, rhs), solver)


def test_solve_w1_nonconvergence_reported(kac2, grid2_33, rng):
    cfg = SolverConfig(rel_tolerance=1e-12, max_iterations=3)
    rhs = rng.standard_normal((2, grid2_33.total_points))
    V, rep = solve_w1(kac2, stack_form(grid2_33, rhs), cfg)
    assert not rep.converged
    assert rep.iterations == 3
    assert rep.final_relative_residual > 1e-12


def test_solve_zero_form_gaussian_coordinate(gauss2, grid2_33, solver, x0_2):
    """f = x0 for g = x0 under the pure Gaussian, weighted-L2 on the mask."""
    f, rep = solve_zero_form(gauss2, x0_2, solver, grid2_33)
    assert rep.converged
    x = coords(grid2_33)
    w = quad_weights(grid2_33)
    rho = np.exp(-0.5 * np.sum(x * x, 1))
    ok = np.isfinite(f.values)
    err = np.sqrt(np.nansum(w[ok] * (f.values[ok] - x[ok, 0]) ** 2 * rho[ok])
                  / np.sum(w * rho))
    assert err < 1e-3


def test_solve_zero_form_constant_g(lat2, kac2, grid2_33, solver):
    from wittenlab.potential import linear_observable
    g = linear_observable(lat2, {(0,): 1.0})
    # a constant is realized as g - g, i.e. zero rhs after centering
    f, rep = solve_zero_form(kac2, g, solver, grid2_33)
    assert rep.converged
    # mean-zero within quadrature tolerance
    gd = ground_density(grid2_33, kac2)
    w = quad_weights(grid2_33)
    ok = np.isfinite(f.values)
    mean = np.sum((w * gd.field.values ** 2 * np.where(ok, f.values, 0.0)))
    assert abs(mean) / gd.norm_sq < 1e-10


def test_solve_zero_form_mean_zero_and_mask(kac2, grid2_33, solver, x0_2):
    f, rep = solve_zero_form(kac2, x0_2, solver, grid2_33)
    mask = gibbs_mask(kac2, grid2_33)
    assert np.all(np.isfinite(f.values[mask]))
    assert np.all(~np.isfinite(f.values[~mask]))
    gd = ground_density(grid2_33, kac2)
    w = quad_weights(grid2_33)
    vals = np.where(mask, f.values, 0.0)
    assert abs(np.sum(w * vals * gd.field.values ** 2)) / gd.norm_sq < 1e-10


def test_solve_zero_form_empty_mask(lat2, solver):
    """A potential with no high-weight region trips the mask guard."""
    from dataclasses import dataclass
    from wittenlab.errors import EmptyMaskError
    from wittenlab.potential import PotentialModel

    @dataclass(frozen=True)
    class Shifted(PotentialModel):
        lattice: object
        kind = "shifted"

        def phi(self, x):
            return 0.5 * np.sum(x * x, axis=-1) + 100.0

        def grad(self, x):
            return np.array(x, copy=True)

        def hess(self, x):
            n = self.lattice.n_sites
            return np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n)).copy()

        def phi_laplacian(self, x):
            return np.full(x.shape[:-1], float(self.lattice.n_sites))

        def hess_apply_on(self, xc):
            return lambda V: V.copy()

        def coupled_groups(self):
            return []

    model = Shifted(lat2)
    g = build_grid(lat2, 6.0, 17)
    from wittenlab.potential import coordinate_observable
    with pytest.raises(EmptyMaskError):
        solve_zero_form(model, coordinate_observable(lat2, 0), solver, g)


def test_kac_zero_form_dense_oracle(lat2, kac2, solver, x0_2):
    """Iterative masked f against a dense factorized solve at m=17."""
    import scipy.sparse as sp
    from scipy.sparse.linalg import splu
    from wittenlab.witten import potential_term
    g17 = build_grid(lat2, 6.0, 17)
    f, rep = solve_zero_form(kac2, x0_2, solver, g17)

    # dense W0 with the same stencil
    m, N = 17, g17.total_points
    inv_h2 = 1.0 / g17.spacing ** 2
    main = sp.diags([np.full(m - 2, -1 / 12), np.full(m - 1, 16 / 12),
                     np.full(m, -30 / 12), np.full(m - 1, 16 / 12),
                     np.full(m - 2, -1 / 12)], [-2, -1, 0, 1, 2])
    lap = sp.kron(main, sp.identity(m)) + sp.kron(sp.identity(m), main)
    W0 = (-inv_h2 * lap + sp.diags(potential_term(kac2, g17))).tocsc()
    gd = ground_density(g17, kac2)
    phi0 = gd.field.values
    x = coords(g17)
    w = quad_weights(g17)
    gv = x[:, 0]
    mean = np.sum(w * gv * phi0 ** 2) / gd.norm_sq
    rhs = (gv - mean) * phi0
    # solve the singular-ish system in the complement via augmented system
    unit = phi0 / np.linalg.norm(phi0)
    A = sp.bmat([[W0, unit[:, None]], [unit[None, :], None]], format="csc")
    sol = splu(A).solve(np.concatenate([rhs, [0.0]]))
    u = sol[:-1]
    c = np.sum(w * u * phi0) / gd.norm_sq
    u -= c * phi0
    mask = gibbs_mask(kac2, g17)
    f_dense = u[mask] / phi0[mask]
    err = np.abs(f.values[mask] - f_dense)
    weight = phi0[mask] ** 2
    rel = np.sqrt(np.sum(weight * err ** 2) / np.sum(weight))
    assert rel < 1e-6


# ------------------------------------------------------------------ probes

def test_spectral_gap_gaussian(gauss2, grid2_33):
    val = spectral_gap_probe(gauss2, 3, grid=grid2_33)
    assert val >= 1.0 - 5 * grid2_33.spacing ** 2
    assert val < 1.2


def test_spectral_gap_kac(kac2, grid2_33):
    """Upper bound near delta_o = 1 - 2 nu from the dense oracle side."""
    val = spectral_gap_probe(kac2, 3, grid=grid2_33)
    assert val >= 0.9 - 5 * grid2_33.spacing ** 2
    assert val <= 1.0


def test_spectral_gap_needs_trials(kac2, grid2_33):
    with pytest.raises(InvalidParameterError):
        spectral_gap_probe(kac2, 0, grid=grid2_33)


def test_cg_iterations_grow_with_weaker_margin(lat2, grid2_33, solver, rng):
    """Iteration counts are monotone as nu increases (smaller gap)."""
    rhs = rng.standard_normal((2, grid2_33.total_points))
    rhs *= interior_mask(grid2_33)
    iters = []
    for nu in (1e-9, 0.05, 0.1):
        model = gaussian_potential(lat2) if nu < 1e-6 \
            else kac_potential(lat2, nu)
        _, rep = solve_w1(model, stack_form(grid2_33, rhs), solver)
        iters.append(rep.iterations)
    assert iters[0] <= iters[1] + 2 and iters[1] <= iters[2] + 2


def test_solver_config_validation():
    with pytest.raises(InvalidParameterError):
        SolverConfig(rel_tolerance=2.0)
    with pytest.raises(InvalidParameterError):
        SolverConfig(max_iterations=0)
    with pytest.raises(InvalidParameterError):
        SolverConfig(preconditioner="ilu")


def test_solve_report_invariant(kac2, grid2_33, solver, rng):
    rhs = rng.standard_normal((2, grid2_33.total_points))
    _, rep = solve_w1(kac2, stack_form(grid2_33, rhs), solver)
    if rep.converged:
        assert rep.final_relative_residual <= solver.rel_tolerance
