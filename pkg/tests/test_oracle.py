import math

import numpy as np
import pytest

from wittenlab.errors import (InvalidParameterError, ResourceLimitError,
                              WindowError)
from wittenlab.grid import build_grid, one_form_from_stack, ground_density
from wittenlab.lattice import build_lattice
from wittenlab.potential import (coordinate_observable,
                                 kac_potential, square_observable)
from wittenlab.oracle import (McmcConfig, dense_solve_w1,
                              fd_theta_derivative, fd_theta_error_estimate,
                              fd_v_derivative, mcmc_centered_product,
                              mcmc_covariance, mcmc_expectation, run_mcmc)
from wittenlab.pressure import make_perturbed_system
from wittenlab.witten import SolverConfig, solve_w1


@pytest.fixture(scope="module")
def grid2_17(lat2):
    return build_grid(lat2, 6.0, 17)


# ------------------------------------------------------------ dense solves

def test_dense_matches_iterative_eigenvector(gauss2, grid2_17):
    gd = ground_density(grid2_17, gauss2)
    rhs = np.zeros((2, grid2_17.total_points))
    rhs[0] = gd.field.values
    form = one_form_from_stack(grid2_17, rhs)
    dense = dense_solve_w1(gauss2, form).stack()
    it, rep = solve_w1(gauss2, form, SolverConfig(rel_tolerance=1e-12))
    assert np.linalg.norm(dense - it.stack()) / np.linalg.norm(dense) < 1e-10


def test_dense_vs_iterative_random_rhs(kac2, grid2_17, rng):
    """Acceptance-style: |dense - cg| / |dense| <= 10 * cg tolerance."""
    cfg = SolverConfig(rel_tolerance=1e-8)
    for _ in range(5):
        rhs = rng.standard_normal((2, grid2_17.total_points))
        form = one_form_from_stack(grid2_17, rhs)
        dense = dense_solve_w1(kac2, form).stack()
        it, rep = solve_w1(kac2, form, cfg)
        assert rep.converged
        rel = np.linalg.norm(dense - it.stack()) / np.linalg.norm(dense)
        assert rel <= 10 * cfg.rel_tolerance


def test_dense_solve_size_guard(kac2):
    lat = build_lattice(1, [2])
    big = build_grid(lat, 6.0, 251)
    rhs = one_form_from_stack(big, np.zeros((2, big.total_points)))
    with pytest.raises(ResourceLimitError):
        dense_solve_w1(kac2, rhs)


def test_dense_solve_deterministic(kac2, grid2_17, rng):
    rhs = one_form_from_stack(grid2_17,
                              rng.standard_normal((2, grid2_17.total_points)))
    a = dense_solve_w1(kac2, rhs).stack()
    b = dense_solve_w1(kac2, rhs).stack()
    assert np.array_equal(a, b)


# ------------------------------------------------------------------- MCMC

QUICK = McmcConfig(chain_length=30000, burn_in=2000, proposal_std=None,
                   seed=99, thinning=4, chains=16)


def test_mcmc_config_validation():
    with pytest.raises(InvalidParameterError):
        McmcConfig(chain_length=100, burn_in=200)
    with pytest.raises(InvalidParameterError):
        McmcConfig(proposal_std=-1.0)
    with pytest.raises(InvalidParameterError):
        McmcConfig(thinning=0)


def test_mcmc_gaussian_mean_and_variance(lat2, gauss2):
    est = mcmc_expectation(gauss2, coordinate_observable(lat2, 0), QUICK)
    assert abs(est.mean) <= 3 * est.standard_error + 1e-12
    assert 0.05 <= est.acceptance_rate <= 0.95
    assert est.effective_sample_size > 100
    est2 = mcmc_expectation(gauss2, square_observable(lat2, 0), QUICK)
    assert abs(est2.mean - 1.0) <= 3 * est2.standard_error


def test_mcmc_deterministic_given_seed(lat2, kac2):
    a = mcmc_expectation(kac2, square_observable(lat2, 0), QUICK)
    b = mcmc_expectation(kac2, square_observable(lat2, 0), QUICK)
    assert a.mean == b.mean
    assert a.standard_error == b.standard_error


def test_mcmc_seed_changes_stream(lat2, kac2):
    cfg2 = McmcConfig(chain_length=30000, burn_in=2000, proposal_std=None,
                      seed=100, thinning=4, chains=16)
    a = mcmc_expectation(kac2, square_observable(lat2, 0), QUICK)
    b = mcmc_expectation(kac2, square_observable(lat2, 0), cfg2)
    assert a.mean != b.mean


def test_mcmc_covariance_cross_oracle(lat2, kac2, grid2_33, x0_2, x1_2):
    """Sampled covariance against the quadrature value, three sigma."""
    from wittenlab.correlation import truncated_correlation
    cfg = McmcConfig(chain_length=60000, burn_in=4000, proposal_std=None,
                     seed=7, thinning=4, chains=32)
    est = mcmc_covariance(kac2, x0_2, x1_2, cfg)
    quad = truncated_correlation(kac2, [x0_2, x1_2], grid2_33)
    assert abs(est.mean - quad.value) <= 3 * est.standard_error


def test_mcmc_centered_product_matches_quadrature(lat2, grid2_33):
    """Third centered moment of a tilted (asymmetric) model, both routes."""
    from wittenlab.correlation import truncated_correlation
    from wittenlab.potential import bump_observable, tilt_potential
    kac = kac_potential(lat2, 0.1)
    bump = bump_observable(lat2, [(0,)], [0.8], 0.7)
    model = tilt_potential(kac, bump, 0.3)
    gs = [coordinate_observable(lat2, 0), coordinate_observable(lat2, 0),
          coordinate_observable(lat2, 1)]
    cfg = McmcConfig(chain_length=80000, burn_in=6000, proposal_std=None,
                     seed=12, thinning=4, chains=32)
    est = mcmc_centered_product(model, gs, cfg)
    quad = truncated_correlation(model, gs, grid2_33)
    assert abs(est.mean - quad.value) <= 3 * est.standard_error + 1e-4


def test_mcmc_tuning_warning_attached(lat2, gauss2):
    cfg = McmcConfig(chain_length=5000, burn_in=500, proposal_std=200.0,
                     seed=1, thinning=1, chains=8)
    est = mcmc_expectation(gauss2, coordinate_observable(lat2, 0), cfg)
    assert est.acceptance_rate < 0.05
    assert est.warnings


def test_mcmc_untruncated_matches_box(lat2, kac2, grid2_33):
    """Box-truncation bias is below the sampling noise at L=6."""
    from wittenlab.correlation import gibbs_mean
    sq = square_observable(lat2, 0)
    est = mcmc_expectation(kac2, sq, QUICK)
    quad = gibbs_mean(kac2, sq, grid2_33)
    assert abs(est.mean - quad.value) <= 3 * est.standard_error


# ----------------------------------------------------------- t derivatives

def test_fd_theta_gaussian_quadratic(lat2, gauss2, x0_2):
    sys_ = make_perturbed_system(gauss2, x0_2, 0.0)
    assert fd_theta_derivative(sys_, 1) == pytest.approx(0.0, abs=1e-9)
    assert fd_theta_derivative(sys_, 2) == pytest.approx(1.0, abs=1e-6)
    assert fd_theta_derivative(sys_, 3) == pytest.approx(0.0, abs=1e-6)


def test_fd_theta_step_halving_consistency(lat2, kac2, gsum2):
    """Halving the step moves the estimate by at most 4x the claimed error."""
    sys_ = make_perturbed_system(kac2, gsum2, 0.0)
    d1 = fd_theta_derivative(sys_, 2, step=1e-2)
    d2 = fd_theta_derivative(sys_, 2, step=5e-3)
    est = fd_theta_error_estimate(sys_, 2, step=1e-2)
    assert abs(d1 - d2) <= 4 * max(est, 1e-11)


def test_fd_theta_window_guard(lat2, kac2, gsum2):
    sys_ = make_perturbed_system(kac2, gsum2, 0.0)
    with pytest.raises(WindowError):
        fd_theta_derivative(sys_, 4, step=1.0)
    with pytest.raises(InvalidParameterError):
        fd_theta_derivative(sys_, 5)


def test_fd_v_gaussian_constant_in_t(lat2, gauss2, x0_2):
    sys_ = make_perturbed_system(gauss2, x0_2, 0.0)
    fdv = fd_v_derivative(sys_, 1e-2).stack()
    assert np.abs(fdv).max() < 1e-5


def test_fd_v_epsilon_validation(lat2, kac2, x0_2):
    sys_ = make_perturbed_system(kac2, x0_2, 0.0)
    with pytest.raises(InvalidParameterError):
        fd_v_derivative(sys_, 0.0)


# --------------------------------------------------------------- internals

def test_run_mcmc_batch_count(lat2, gauss2):
    fns = [lambda s: s[..., 0]]
    bmean, means, raw_var, acc, prop, total = run_mcmc(gauss2, fns, QUICK)
    assert bmean.shape == (32, QUICK.chains, 1)
    assert total == ((QUICK.chain_length - QUICK.burn_in) // QUICK.thinning
                     ) * QUICK.chains
    assert prop > 0
