"""Gibbs means, inverse-operator covariances, truncated n-point
correlations, weighted exponential-decay reports, and decay-rate fits.

Covariances come from the one-form solve: cov(g, h) is the Gibbs-weighted
pairing of W1^{-1}(e^{-Phi/2} grad g) with e^{-Phi/2} grad h. Every value
carries an error estimate: a coarse-subgrid quadrature delta for the
deterministic paths, a batch-means standard error for Monte Carlo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (ArityError, InsufficientDataError, InvalidParameterError,
                     MeasureError)
from .grid import (GridSpec, ScalarField, coords, default_grid, fd_gradient_o4,
                   ground_density, one_form_from_stack, phi_field, quad_weights)
from .lattice import set_distance
from .potential import Observable, PotentialModel, proper_support_required
from .witten import SolveReport, SolverConfig, require_converged, solve_w1

#: Gibbs-weight level above which solved derivative fields are trusted
#: pointwise (sup-type reports). Far below it, the exp(+Phi/2) dictionary
#: amplifies discretization error past any useful level.
REPORT_FLOOR = 1e-4


@dataclass
class CorrelationReport:
    value: float
    method: str                                   # hs_formula | quadrature | mcmc
    solver_reports: list = field(default_factory=list)
    error_estimate: float = 0.0
    warnings: tuple = ()

    def to_dict(self):
        return {"value": self.value, "method": self.method,
                "error_estimate": self.error_estimate,
                "warnings": list(self.warnings),
                "solver_reports": [r.to_dict() for r in self.solver_reports]}


@dataclass
class DecayFitReport:
    pairs: list                                   # (distance, magnitude)
    kappa_est: float
    prefactor_C: float
    r_squared: float
    excluded_count: int = 0
    residuals: tuple = ()                         # per-pair |T| - C*envelope
    stderrs: tuple = ()

    def to_dict(self):
        return {"pairs": [list(p) for p in self.pairs],
                "kappa_est": self.kappa_est, "prefactor_C": self.prefactor_C,
                "r_squared": self.r_squared, "excluded_count": self.excluded_count,
                "residuals": list(self.residuals), "stderrs": list(self.stderrs)}


@dataclass
class WeightedDerivativeReport:
    order_k: int
    kappa: float
    sup_value: float
    per_node_profile: ScalarField | None = None

    def to_dict(self):
        return {"order_k": self.order_k, "kappa": self.kappa,
                "sup_value": self.sup_value}


def _gibbs_parts(model: PotentialModel, grid: GridSpec):
    gd = ground_density(grid, model)
    if gd.norm_sq <= 0:
        raise MeasureError("degenerate Gibbs normalization on the box")
    return gd, quad_weights(grid), coords(grid)


def _subgrid_value(grid: GridSpec, integrand: np.ndarray, normalizer: np.ndarray) -> float:
    """Ratio of trapezoid integrals on the stride-2 subgrid (refinement
    oracle in reverse: the coarse answer, for error deltas)."""
    n, m = grid.n_sites, grid.points_per_site
    sel = (slice(None, None, 2),) * n
    mc = (m + 1) // 2
    hc = 2.0 * grid.half_width / (mc - 1)
    w1 = np.full(mc, hc)
    w1[0] = w1[-1] = hc / 2.0
    wc = np.array([1.0])
    for _ in range(n):
        wc = np.multiply.outer(wc, w1).reshape(-1)
    top = float(np.sum(wc * integrand.reshape((m,) * n)[sel].reshape(-1)))
    bot = float(np.sum(wc * normalizer.reshape((m,) * n)[sel].reshape(-1)))
    return top / bot


def _gibbs_ratio(grid, integrand, rho) -> tuple[float, float]:
    """Gibbs mean of an integrand plus a subgrid refinement delta."""
    w = quad_weights(grid)
    val = float(np.sum(w * integrand)) / float(np.sum(w * rho))
    coarse = _subgrid_value(grid, integrand, rho)
    return val, abs(val - coarse)


def gibbs_mean(model: PotentialModel, g: Observable,
               grid: GridSpec | None = None) -> CorrelationReport:
    """<g> under exp(-Phi) dx / Z, by tensor quadrature."""
    if grid is None:
        grid = default_grid(model.lattice)
    gd, w, x = _gibbs_parts(model, grid)
    rho = gd.field.values ** 2
    val, delta = _gibbs_ratio(grid, g.value(x) * rho, rho)
    return CorrelationReport(val, "quadrature", [], delta)


def solve_gradient_form(model: PotentialModel, g: Observable,
                        cfg: SolverConfig, grid: GridSpec
                        ) -> tuple[np.ndarray, SolveReport]:
    """W1^{-1}(e^{-Phi/2} grad g) with the analytic right-hand side.

    In the weighted picture this is e^{-Phi/2} grad f for the zero-form
    solution f of g; returns the raw (n, N) component stack.
    """
    gd = ground_density(grid, model)
    rhs = np.ascontiguousarray(g.grad(coords(grid)).T) * gd.field.values
    V, rep = solve_w1(model, one_form_from_stack(grid, rhs), cfg)
    require_converged(rep)
    return V.stack(), rep


def covariance_hs(model: PotentialModel, g: Observable, h: Observable,
                  cfg: SolverConfig = SolverConfig(),
                  grid: GridSpec | None = None) -> CorrelationReport:
    """cov(g, h) through the inverse one-form operator."""
    if grid is None:
        grid = default_grid(model.lattice)
    gd, w, x = _gibbs_parts(model, grid)
    V, rep = solve_gradient_form(model, g, cfg, grid)
    Gh = h.grad(x).T * gd.field.values
    rho = gd.field.values ** 2
    integrand = np.sum(V * Gh, axis=0)
    val, delta = _gibbs_ratio(grid, integrand, rho)
    err = delta + abs(val) * rep.final_relative_residual
    return CorrelationReport(val, "hs_formula", [rep], err)


def truncated_correlation(model: PotentialModel, gs,
                          grid: GridSpec | None = None,
                          method: str = "quadrature",
                          mcmc_cfg=None) -> CorrelationReport:
    """<g1,...,gk> = <prod (g_i - <g_i>)> by direct quadrature or MCMC."""
    gs = list(gs)
    if len(gs) < 2:
        raise ArityError(f"truncated correlation needs k >= 2, got {len(gs)}")
    if method == "mcmc":
        from .oracle import McmcConfig, mcmc_centered_product
        est = mcmc_centered_product(model, gs, mcmc_cfg or McmcConfig())
        return CorrelationReport(est.mean, "mcmc", [], est.standard_error)
    if method != "quadrature":
        raise InvalidParameterError(f"unknown method {method!r}")
    if len(gs) > 4:
        raise InvalidParameterError(
            "quadrature path supports k <= 4; use method='mcmc'")
    if grid is None:
        grid = default_grid(model.lattice)
    gd, w, x = _gibbs_parts(model, grid)
    rho = gd.field.values ** 2
    wsum = float(np.sum(w * rho))
    prod = np.ones(grid.total_points)
    for g in gs:
        v = g.value(x)
        prod = prod * (v - float(np.sum(w * v * rho)) / wsum)
    val, delta = _gibbs_ratio(grid, prod * rho, rho)
    return CorrelationReport(val, "quadrature", [], delta)


def _hess_from_form(grid: GridSpec, V: np.ndarray, phi0: np.ndarray
                    ) -> tuple[np.ndarray, float]:
    """exp(-Phi/2)-weighted Hessian of f from its solved gradient form.

    B[i, j] = phi0 * d_j (V_i / phi0) equals exp(-Phi/2) d_j d_i f up to
    discretization; returned symmetrized, with the relative asymmetry seen
    on the trusted region (a discretization health number).
    """
    n = grid.n_sites
    B = np.empty((n, n, grid.total_points))
    for i in range(n):
        B[i] = fd_gradient_o4(ScalarField(grid, V[i] / phi0)).stack()
    B *= phi0[None, None, :]
    Bt = np.transpose(B, (1, 0, 2))
    region = phi0 ** 2 >= REPORT_FLOOR
    num = float(np.abs((B - Bt))[:, :, region].max())
    den = float(np.abs(B)[:, :, region].max()) or 1.0
    return 0.5 * (B + Bt), num / den


def threepoint_hs(model: PotentialModel, g1: Observable, g2: Observable,
                  g3: Observable, cfg: SolverConfig = SolverConfig(),
                  grid: GridSpec | None = None) -> CorrelationReport:
    """The four-term decomposition of the truncated 3-point function.

    <g1,g2,g3> = <grad f3 . (Hess f1) grad g2> + <grad f3 . (Hess g2) grad f1>
               + <grad f2 . (Hess f1) grad g3> + <grad f2 . (Hess g3) grad f1>,
    each f_i the zero-form solution of g_i. Hess f1 is differentiated from
    the solved one-form and symmetrized.
    """
    if grid is None:
        grid = default_grid(model.lattice)
    gd, w, x = _gibbs_parts(model, grid)
    phi0 = gd.field.values
    rho = phi0 ** 2
    V1, r1 = solve_gradient_form(model, g1, cfg, grid)
    V2, r2 = solve_gradient_form(model, g2, cfg, grid)
    V3, r3 = solve_gradient_form(model, g3, cfg, grid)
    B, asym = _hess_from_form(grid, V1, phi0)
    n = grid.n_sites

    def hess_f1_term(Va, gb):
        dg = gb.grad(x).T
        tot = np.einsum("iN,ijN,jN->N", Va, B, dg)
        return tot

    def hess_g_term(Va, gb, Vc):
        hb = gb.hess(x)
        return np.einsum("iN,Nij,jN->N", Va, hb, Vc)

    integrand = (hess_f1_term(V3, g2) + hess_g_term(V3, g2, V1)
                 + hess_f1_term(V2, g3) + hess_g_term(V2, g3, V1))
    val, delta = _gibbs_ratio(grid, integrand, rho)
    warnings = ()
    if asym > 2e-2:
        warnings = (f"gradient-form Hessian asymmetry {asym:.2e} "
                    "beyond discretization tolerance",)
    return CorrelationReport(val, "hs_formula", [r1, r2, r3], delta, warnings)


def intermediate_identity_check(model: PotentialModel, c: Observable,
                                g: Observable, cfg: SolverConfig = SolverConfig(),
                                grid: GridSpec | None = None) -> float:
    """|<c (g - <g>)> - <grad f . grad c>|, both sides by quadrature."""
    if grid is None:
        grid = default_grid(model.lattice)
    gd, w, x = _gibbs_parts(model, grid)
    rho = gd.field.values ** 2
    wsum = float(np.sum(w * rho))
    gv, cv = g.value(x), c.value(x)
    mean_g = float(np.sum(w * gv * rho)) / wsum
    lhs = float(np.sum(w * cv * (gv - mean_g) * rho)) / wsum
    V, rep = solve_gradient_form(model, g, cfg, grid)
    Gc = c.grad(x).T * gd.field.values
    rhs = float(np.sum(w * np.sum(V * Gc, axis=0))) / wsum
    return abs(lhs - rhs)


def _support_distances(model: PotentialModel, g: Observable) -> np.ndarray:
    lat = model.lattice
    return np.array([float(set_distance(lat, s, g.support)) for s in lat.sites])


def weighted_gradient_report(model: PotentialModel, g: Observable,
                             kappa: float, cfg: SolverConfig = SolverConfig(),
                             grid: GridSpec | None = None,
                             keep_profile: bool = False
                             ) -> WeightedDerivativeReport:
    """sup over trusted nodes of sum_i (d_i f)^2 exp(2 kappa d(i, S_g)).

    grad f is taken from the one-form solve (pointwise stable), evaluated
    where exp(-Phi) >= REPORT_FLOOR.
    """
    proper_support_required(g)
    if grid is None:
        grid = default_grid(model.lattice)
    V, rep = solve_gradient_form(model, g, cfg, grid)
    gd = ground_density(grid, model)
    q = V / gd.field.values
    region = phi_field(model, grid) <= -math.log(REPORT_FLOOR)
    d = _support_distances(model, g)
    tot = np.zeros(grid.total_points)
    for i in range(grid.n_sites):
        tot += math.exp(2.0 * kappa * d[i]) * q[i] ** 2
    profile = ScalarField(grid, np.where(region, tot, np.nan), masked=True) \
        if keep_profile else None
    return WeightedDerivativeReport(1, kappa, float(tot[region].max()), profile)


def weighted_higher_report(model: PotentialModel, g: Observable, k: int,
                           kappa: float, cfg: SolverConfig = SolverConfig(),
                           grid: GridSpec | None = None
                           ) -> WeightedDerivativeReport:
    """sup of the weighted square sum of k-th mixed partials of f, k = 2, 3.

    Partials come from nested central differences of the solved gradient
    form; index tuples with repeats are included exactly as the estimate
    sums them.
    """
    from .errors import UnsupportedOrderError
    if k not in (2, 3):
        raise UnsupportedOrderError(f"weighted higher report supports k in {{2,3}}, got {k}")
    proper_support_required(g)
    if grid is None:
        grid = default_grid(model.lattice)
    V, rep = solve_gradient_form(model, g, cfg, grid)
    gd = ground_density(grid, model)
    phi0 = gd.field.values
    q = V / phi0
    n = grid.n_sites
    d = _support_distances(model, g)
    region = phi_field(model, grid) <= -math.log(REPORT_FLOOR)

    D1 = np.empty((n, n, grid.total_points))     # D1[i,j] = d_j q_i
    for i in range(n):
        D1[i] = fd_gradient_o4(ScalarField(grid, q[i])).stack()
    D1 = 0.5 * (D1 + np.transpose(D1, (1, 0, 2)))
    tot = np.zeros(grid.total_points)
    if k == 2:
        for i in range(n):
            for j in range(n):
                tot += math.exp(2.0 * kappa * min(d[i], d[j])) * D1[i, j] ** 2
    else:
        for i in range(n):
            for j in range(i, n):
                Dij = fd_gradient_o4(ScalarField(grid, D1[i, j])).stack()
                for l in range(n):
                    mult = 2.0 if j > i else 1.0   # (i,j) vs (j,i) tuples
                    tot += mult * math.exp(2.0 * kappa * min(d[i], d[j], d[l])) \
                        * Dij[l] ** 2
    return WeightedDerivativeReport(k, kappa, float(tot[region].max()))


#: Detection threshold for log fits, in standard errors. Two-sigma admits
#: borderline points whose order-one relative error wrecks the fit; three
#: sigma keeps only magnitudes that are actually resolved.
NOISE_SIGMA = 3.0


def decay_fit(points, noise_floor: float = 1e-12,
              stderr_multiplier: float = NOISE_SIGMA) -> DecayFitReport:
    """Least squares of log magnitude against distance.

    Points are (distance, magnitude) or (distance, magnitude, stderr); a
    point is usable when its magnitude exceeds
    max(noise_floor, stderr_multiplier * stderr).
    """
    usable, excluded = [], 0
    for p in points:
        dist, mag = p[0], p[1]
        floor = max(noise_floor, stderr_multiplier * p[2]) if len(p) > 2 \
            else noise_floor
        if mag > floor:
            usable.append((float(dist), float(mag)))
        else:
            excluded += 1
    if len({d for d, _ in usable}) < 2:
        raise InsufficientDataError(
            f"decay fit needs >= 2 distinct usable distances, have {len(usable)} "
            f"usable / {excluded} excluded")
    d = np.array([p[0] for p in usable])
    lm = np.log([p[1] for p in usable])
    A = np.vstack([d, np.ones_like(d)]).T
    coef, *_ = np.linalg.lstsq(A, lm, rcond=None)
    pred = A @ coef
    sst = float(np.sum((lm - lm.mean()) ** 2))
    ssr = float(np.sum((lm - pred) ** 2))
    r2 = 1.0 if sst == 0 else 1.0 - ssr / sst
    return DecayFitReport([(p[0], p[1]) for p in usable], -float(coef[0]),
                          float(np.exp(coef[1])), r2, excluded)


def threepoint_bound_check(model: PotentialModel, i, js, ks,
                           kappa1: float = 2.0,
                           grid: GridSpec | None = None,
                           method: str = "auto", mcmc_cfg=None,
                           noise_floor: float = 1e-12) -> DecayFitReport:
    """Fit |<x_i, x_j, x_k>| against C [e^{-k1 d(i,j)} + e^{-k1 d(i,k)}].

    kappa1 bounds the scanned decay-rate grid. js and ks pair up to give
    the (j, k) sweep; all three sites of a triple must be distinct. Values
    come from quadrature on small lattices, MCMC otherwise. Sub-noise
    triples are excluded from the log fit but kept in the residual table;
    when every triple is sub-noise the envelope degenerates to C = 0 (the
    bound holds trivially).
    """
    from .lattice import graph_distance
    from .potential import coordinate_observable
    lat = model.lattice
    pairs = list(zip(js, ks))
    for j, k in pairs:
        if len({lat.ordinal(i), lat.ordinal(j), lat.ordinal(k)}) < 3:
            raise InvalidParameterError(f"triple ({i},{j},{k}) has duplicate sites")
    if method == "auto":
        method = "quadrature" if lat.n_sites <= 3 else "mcmc"
    values, errors = [], []
    if method == "mcmc":
        from .oracle import McmcConfig, mcmc_centered_products
        cfgm = mcmc_cfg or McmcConfig()
        obs = {}
        for site in {lat.ordinal(s) for jk in pairs for s in (i, *jk)}:
            obs[site] = coordinate_observable(lat, lat.sites[site])
        groups = [[obs[lat.ordinal(i)], obs[lat.ordinal(j)], obs[lat.ordinal(k)]]
                  for j, k in pairs]
        for est in mcmc_centered_products(model, groups, cfgm):
            values.append(est.mean)
            errors.append(est.standard_error)
    else:
        for j, k in pairs:
            gs = [coordinate_observable(lat, s) for s in (i, j, k)]
            rep = truncated_correlation(model, gs, grid=grid)
            values.append(rep.value)
            errors.append(rep.error_estimate)

    dists = [(graph_distance(lat, i, j), graph_distance(lat, i, k))
             for j, k in pairs]
    mags = np.abs(values)
    floors = np.array([max(noise_floor, NOISE_SIGMA * e) for e in errors])
    use = mags > floors
    kgrid = np.linspace(0.05, max(kappa1, 0.1), 40)
    if not use.any():
        C, kbest, r2 = 0.0, float(kgrid[len(kgrid) // 2]), 1.0
    else:
        best = None
        lm = np.log(mags[use])
        for kap in kgrid:
            env = np.array([math.exp(-kap * dj) + math.exp(-kap * dk)
                            for dj, dk in dists])[use]
            lc = float(np.mean(lm - np.log(env)))
            sse = float(np.sum((lm - (np.log(env) + lc)) ** 2))
            if best is None or sse < best[0]:
                best = (sse, kap, math.exp(lc))
        sse, kbest, C = best
        lmall = lm
        sst = float(np.sum((lmall - lmall.mean()) ** 2))
        r2 = 1.0 if sst == 0 else max(0.0, 1.0 - sse / sst)
    env = np.array([math.exp(-kbest * dj) + math.exp(-kbest * dk)
                    for dj, dk in dists])
    residuals = tuple(float(m - C * e) for m, e in zip(mags, env))
    pairs_out = [(min(dj, dk), float(m)) for (dj, dk), m in zip(dists, mags)]
    return DecayFitReport(pairs_out, float(kbest), float(C), float(r2),
                          int(np.count_nonzero(~use)), residuals,
                          tuple(float(e) for e in errors))
