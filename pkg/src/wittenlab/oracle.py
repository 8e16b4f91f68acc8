"""Independent reference computations: dense factorized solves on small
grids, Metropolis sampling of the untruncated Gibbs measure with
batch-means error bars, and finite-difference derivatives in the tilt
parameter.

Everything here must stay structurally independent of the iterative paths
it cross-checks: the dense solve assembles the operator explicitly and
factorizes it; the samplers never see a grid; the t-derivatives only ever
evaluate the log-partition quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (DefinitenessError, InvalidParameterError,
                     ResourceLimitError, WindowError)
from .grid import GridSpec, OneFormField, coords, one_form_from_stack, quad_weights
from .potential import Observable, PotentialModel, tilt_bound
from .pressure import PerturbedSystem
from .witten import STENCIL_ORDER, potential_term

DENSE_SIZE_LIMIT = 50_000


# ----------------------------------------------------------- dense solves

def assemble_w1_matrix(model: PotentialModel, grid: GridSpec):
    """The full W1 matrix (sparse CSC), same stencil as the matrix-free path."""
    import scipy.sparse as sp
    n, m, N = grid.n_sites, grid.points_per_site, grid.total_points
    inv_h2 = 1.0 / grid.spacing ** 2
    if STENCIL_ORDER == 4:
        main = sp.diags([np.full(m - 2, -1 / 12), np.full(m - 1, 16 / 12),
                         np.full(m, -30 / 12), np.full(m - 1, 16 / 12),
                         np.full(m - 2, -1 / 12)], [-2, -1, 0, 1, 2])
    else:
        main = sp.diags([np.ones(m - 1), -2.0 * np.ones(m), np.ones(m - 1)],
                        [-1, 0, 1])
    lap = sp.csr_matrix((N, N))
    for ax in range(n):
        op = sp.identity(m ** ax, format="csr")
        op = sp.kron(op, main, format="csr")
        op = sp.kron(op, sp.identity(m ** (n - 1 - ax), format="csr"), format="csr")
        lap = lap + op
    a0 = -inv_h2 * lap + sp.diags(potential_term(model, grid))
    H = model.hess(coords(grid))          # (N, n, n)
    blocks = [[a0 + sp.diags(H[:, i, i]) if i == j else sp.diags(H[:, i, j])
               for j in range(n)] for i in range(n)]
    return sp.bmat(blocks, format="csc")


def dense_solve_w1(model: PotentialModel, rhs: OneFormField) -> OneFormField:
    """Direct factorized solve of W1 V = rhs (the brute-force oracle)."""
    from scipy.sparse.linalg import splu
    grid = rhs.grid
    size = grid.total_points * grid.n_sites
    if size > DENSE_SIZE_LIMIT:
        raise ResourceLimitError(
            f"dense solve needs {size} unknowns > limit {DENSE_SIZE_LIMIT}")
    A = assemble_w1_matrix(model, grid)
    try:
        lu = splu(A)
    except RuntimeError as exc:
        raise DefinitenessError(f"dense factorization failed: {exc}")
    x = lu.solve(rhs.stack().reshape(-1))
    return one_form_from_stack(grid, x.reshape(grid.n_sites, grid.total_points))


# ------------------------------------------------------------------- MCMC

@dataclass(frozen=True)
class McmcConfig:
    """Single-site random-walk Metropolis settings.

    chain_length counts sweeps per chain (one proposal per site per
    sweep); proposal_std None means tune toward 40% acceptance with a
    short pre-run. chains independent walkers advance in lockstep, which
    vectorizes the sweep without changing the per-chain dynamics.
    """
    chain_length: int = 200_000
    burn_in: int = 10_000
    proposal_std: float | None = None
    seed: int = 2024
    thinning: int = 4
    chains: int = 32

    def __post_init__(self):
        if self.burn_in >= self.chain_length:
            raise InvalidParameterError("burn_in must be < chain_length")
        if self.proposal_std is not None and self.proposal_std <= 0:
            raise InvalidParameterError("proposal_std must be positive")
        if self.thinning < 1 or self.chains < 1:
            raise InvalidParameterError("thinning and chains must be >= 1")


@dataclass
class McmcEstimate:
    mean: float
    standard_error: float
    acceptance_rate: float
    effective_sample_size: float
    proposal_std: float = 0.0
    warnings: tuple = ()

    def to_dict(self):
        return {"mean": self.mean, "standard_error": self.standard_error,
                "acceptance_rate": self.acceptance_rate,
                "effective_sample_size": self.effective_sample_size,
                "proposal_std": self.proposal_std,
                "warnings": list(self.warnings)}


N_BATCHES = 32
_BLOCK_SWEEPS = 20_000


def _draw(rng, sweeps, n, chains):
    normals = rng.standard_normal((sweeps, n, chains))
    logu = np.log(rng.random((sweeps, n, chains)))
    return normals, logu


def run_mcmc(model: PotentialModel, fns, cfg: McmcConfig):
    """Advance the chains and return per-function batch statistics.

    fns are callables mapping recorded states (K, chains, n) -> (K, chains).
    Returns (batch_means (B_total, n_fns), means, raw_var, acceptance,
    proposal_std) with batches taken within chains.
    """
    n = model.lattice.n_sites
    rng = np.random.default_rng(cfg.seed)
    X = 0.5 * rng.standard_normal((cfg.chains, n))

    prop = cfg.proposal_std
    if prop is None:
        prop = 2.4
        for _ in range(3):
            normals, logu = _draw(rng, 1500, n, cfg.chains)
            _, acc = kernels.metropolis_block(model, X, normals, logu, prop, 1500)
            rate = acc / (1500 * n * cfg.chains)
            prop *= math.exp(2.0 * (rate - 0.40))

    done = 0
    while done < cfg.burn_in:
        s = min(_BLOCK_SWEEPS, cfg.burn_in - done)
        normals, logu = _draw(rng, s, n, cfg.chains)
        kernels.metropolis_block(model, X, normals, logu, prop, s)
        done += s

    main = cfg.chain_length - cfg.burn_in
    rec_per_chain = main // cfg.thinning
    if rec_per_chain < N_BATCHES:
        raise InvalidParameterError(
            f"only {rec_per_chain} recorded sweeps per chain; need >= {N_BATCHES}")
    batch_of = (np.arange(rec_per_chain) * N_BATCHES // rec_per_chain).astype(int)
    n_fns = len(fns)
    bsum = np.zeros((N_BATCHES, cfg.chains, n_fns))
    bcnt = np.zeros(N_BATCHES)
    raw_sum = np.zeros(n_fns)
    raw_sq = np.zeros(n_fns)
    accepted = 0
    done = 0
    r = 0
    while done < main:
        s = min(_BLOCK_SWEEPS, main - done)
        s -= s % cfg.thinning
        if s == 0:
            break
        normals, logu = _draw(rng, s, n, cfg.chains)
        states, acc = kernels.metropolis_block(model, X, normals, logu, prop,
                                               cfg.thinning)
        accepted += acc
        K = states.shape[0]
        vals = np.stack([np.asarray(f(states), dtype=float) for f in fns],
                        axis=-1)                      # (K, chains, n_fns)
        for k in range(K):
            b = batch_of[r + k] if r + k < rec_per_chain else N_BATCHES - 1
            bsum[b] += vals[k]
            bcnt[b] += 1
        flat = vals.reshape(-1, n_fns)
        raw_sum += flat.sum(axis=0)
        raw_sq += (flat ** 2).sum(axis=0)
        r += K
        done += s
    total = r * cfg.chains
    bmean = bsum / bcnt[:, None, None]
    means = raw_sum / total
    raw_var = raw_sq / total - means ** 2
    acc_rate = accepted / (done * n * cfg.chains)
    return bmean, means, raw_var, acc_rate, prop, total


def _estimate_from_batches(cb: np.ndarray, mean: float, raw_var: float,
                           total: int, acc_rate: float, prop: float
                           ) -> McmcEstimate:
    flat = cb.reshape(-1)
    se = float(flat.std(ddof=1) / math.sqrt(flat.size))
    var_bm = float(flat.var(ddof=1))
    ess = total * raw_var / (var_bm * (total / flat.size)) if var_bm > 0 else total
    warnings = ()
    if not (0.05 <= acc_rate <= 0.95):
        warnings = (f"acceptance rate {acc_rate:.3f} outside [0.05, 0.95]; "
                    "retune proposal_std",)
    return McmcEstimate(float(mean), se, float(acc_rate), float(ess),
                        float(prop), warnings)


def _as_fn(obs):
    if isinstance(obs, Observable):
        return obs.value
    return obs


def mcmc_expectation(model: PotentialModel, observable,
                     cfg: McmcConfig = McmcConfig()) -> McmcEstimate:
    """<observable> over the untruncated Gibbs measure, batch-means errors."""
    fn = _as_fn(observable)
    bmean, means, raw_var, acc, prop, total = run_mcmc(model, [fn], cfg)
    return _estimate_from_batches(bmean[:, :, 0], means[0], raw_var[0],
                                  total, acc, prop)


def _centered_product_estimates(model: PotentialModel, groups,
                                cfg: McmcConfig) -> list[McmcEstimate]:
    """Centered products <prod (g - <g>)> for several observable groups
    from one shared chain run.

    The centered product expands over index subsets, so only raw product
    series need tracking; series shared between groups (same observable
    instances) are sampled once. Per-batch means are linearized around the
    global means.
    """
    import itertools
    fn_index: dict = {}
    fns: list = []
    expansions = []
    for gs in groups:
        fns_g = [_as_fn(g) for g in gs]
        k = len(gs)
        entry = []
        for r in range(1, k + 1):
            for sub in itertools.combinations(range(k), r):
                key = tuple(sorted(id(gs[i]) for i in sub))
                if key not in fn_index:
                    chosen = [fns_g[i] for i in sub]

                    def product(s, chosen=chosen):
                        out = chosen[0](s)
                        for f in chosen[1:]:
                            out = out * f(s)
                        return out

                    fn_index[key] = len(fns)
                    fns.append(product)
                entry.append((sub, fn_index[key]))
        expansions.append((gs, entry))

    bmean, means, raw_var, acc, prop, total = run_mcmc(model, fns, cfg)
    out = []
    for gs, entry in expansions:
        k = len(gs)
        singles = {sub[0]: j for sub, j in entry if len(sub) == 1}
        m = [means[singles[i]] for i in range(k)]
        value = (-1.0) ** k * float(np.prod(m))
        cb = np.full(bmean.shape[:2], value)
        full_j = None
        for sub, j in entry:
            rest = [i for i in range(k) if i not in sub]
            coef = (-1.0) ** len(rest) * float(np.prod([m[i] for i in rest])) \
                if rest else 1.0
            cb = cb + coef * bmean[:, :, j]
            value += coef * means[j]
            if len(sub) == k:
                full_j = j
        out.append(_estimate_from_batches(cb, value, raw_var[full_j],
                                          total, acc, prop))
    return out


def mcmc_covariance(model: PotentialModel, g, h,
                    cfg: McmcConfig = McmcConfig()) -> McmcEstimate:
    """cov(g, h) by sampling, with the plug-in means linearized per batch."""
    return _centered_product_estimates(model, [[g, h]], cfg)[0]


def mcmc_covariances(model: PotentialModel, pairs,
                     cfg: McmcConfig = McmcConfig()) -> list[McmcEstimate]:
    """Covariances for many pairs from one shared chain run."""
    return _centered_product_estimates(model, [[g, h] for g, h in pairs], cfg)


def mcmc_centered_product(model: PotentialModel, gs,
                          cfg: McmcConfig = McmcConfig()) -> McmcEstimate:
    """<prod_i (g_i - <g_i>)> by sampling, any product order."""
    return _centered_product_estimates(model, [list(gs)], cfg)[0]


def mcmc_centered_products(model: PotentialModel, groups,
                           cfg: McmcConfig = McmcConfig()) -> list[McmcEstimate]:
    """Centered products for several groups from one shared chain run."""
    return _centered_product_estimates(model, [list(g) for g in groups], cfg)


# -------------------------------------------------- parameter derivatives

def _theta_of_t(sys: PerturbedSystem):
    """Cheap theta(tau) evaluator: the tilt enters only the exponent."""
    from .grid import phi_field
    base_phi = phi_field(sys.base, sys.grid)
    gv = sys.g.value(coords(sys.grid))
    lw = np.log(quad_weights(sys.grid))

    def theta(tau):
        a = -base_phi + tau * gv + lw
        mx = float(a.max())
        return mx + math.log(float(np.sum(np.exp(a - mx))))

    return theta


_STENCILS = {
    1: ((1, 0.5), (-1, -0.5)),
    2: ((1, 1.0), (0, -2.0), (-1, 1.0)),
    3: ((2, 0.5), (1, -1.0), (-1, 1.0), (-2, -0.5)),
    4: ((2, 1.0), (1, -4.0), (0, 6.0), (-1, -4.0), (-2, 1.0)),
}


def fd_theta_derivative(sys: PerturbedSystem, n: int,
                        step: float = 1e-2) -> float:
    """Central finite difference of theta(t) of order n, Richardson refined.

    The full stencil (offsets up to 2*step around t) must stay inside the
    convexity window |t| < T.
    """
    if n not in _STENCILS:
        raise InvalidParameterError(f"fd_theta_derivative supports n in 1..4, got {n}")
    if step <= 0:
        raise InvalidParameterError("step must be positive")
    T = tilt_bound(sys.base, sys.g)
    reach = max(abs(off) for off, _ in _STENCILS[n]) * step
    if abs(sys.t) + reach >= T:
        raise WindowError(f"stencil reach |t|+{reach:.3g} leaves the "
                          f"convexity window T={T:.3g}")
    theta = _theta_of_t(sys)

    def D(s):
        return sum(c * theta(sys.t + off * s) for off, c in _STENCILS[n]) / s ** n

    coarse, fine = D(step), D(step / 2.0)
    return (4.0 * fine - coarse) / 3.0


def fd_theta_error_estimate(sys: PerturbedSystem, n: int,
                            step: float = 1e-2) -> float:
    """|D(step/2) - D(step)| / 3, the Richardson remainder proxy."""
    theta = _theta_of_t(sys)

    def D(s):
        return sum(c * theta(sys.t + off * s) for off, c in _STENCILS[n]) / s ** n

    return abs(D(step / 2.0) - D(step)) / 3.0


def fd_v_derivative(sys: PerturbedSystem, epsilon: float,
                    cfg=None) -> OneFormField:
    """(v(t+eps) - v(t))/eps in the t half-density picture.

    Both solves are mapped with the ground density of t (the t+eps form is
    rescaled by exp(-eps g / 2), which is exact); the quotient converges to
    w(t) at first order in eps.
    """
    from .pressure import make_perturbed_system, _solve_v
    from .witten import SolverConfig
    if epsilon <= 0:
        raise InvalidParameterError("epsilon must be positive")
    cfg = cfg or SolverConfig()
    V0, _ = _solve_v(sys, cfg)
    shifted = make_perturbed_system(sys.base, sys.g, sys.t + epsilon, sys.grid)
    V1, _ = _solve_v(shifted, cfg)
    gv = sys.g.value(coords(sys.grid))
    mapped = V1 * np.exp(-epsilon * gv / 2.0)
    return one_form_from_stack(sys.grid, (mapped - V0) / epsilon)
