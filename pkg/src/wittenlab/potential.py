"""Hamiltonians Phi(x) = x^2/2 + Psi(x) and observables over a lattice.

Built-in models: the pure Gaussian (Psi = 0), the nearest-neighbor Kac
model Phi(x) = x^2/2 - 2 sum_{i~j} ln cosh(sqrt(nu/2)(x_i + x_j)), and a
linear tilt wrapper Phi - t*g. All derivative evaluations are closed-form
up to order 4 and vectorized over the last axis of x (one spin per site,
lattice ordering).
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (ConvexityRiskError, EvaluationError, InvalidParameterError,
                     SupportError, UnsupportedOrderError)
from .lattice import LatticeSpec, SiteSubset, WeightFunction, set_distance

MAX_PARTIAL_ORDER = 4

_LN2 = math.log(2.0)


def _lncosh(s):
    """ln cosh(s), overflow-safe for large |s|."""
    a = np.abs(s)
    return a + np.log1p(np.exp(-2.0 * a)) - _LN2


def _sech2(s):
    """sech(s)^2, overflow-safe."""
    e = np.exp(-2.0 * np.abs(s))
    return 4.0 * e / (1.0 + e) ** 2


def _bond_chain_derivative(order, s):
    """d^order/ds^order of -2 ln cosh(s), orders 1..4."""
    if order == 1:
        return -2.0 * np.tanh(s)
    if order == 2:
        return -2.0 * _sech2(s)
    if order == 3:
        return 4.0 * _sech2(s) * np.tanh(s)
    if order == 4:
        sch = _sech2(s)
        return 4.0 * sch * (sch - 2.0 * np.tanh(s) ** 2)
    raise UnsupportedOrderError(f"bond derivative of order {order} not implemented")


class PotentialModel:
    """Common interface: Phi, grad Phi, Hess Phi, higher partials.

    x has shape (..., n) with n = number of lattice sites; all evaluation
    routines are pure and safe to call concurrently.
    """

    lattice: LatticeSpec
    kind: str

    def phi(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def hess(self, x):
        """Dense Hessian, shape (..., n, n)."""
        raise NotImplementedError

    def phi_laplacian(self, x):
        """Trace of the Hessian, shape (...)."""
        raise NotImplementedError

    def partial(self, indices, x):
        """Mixed partial d^k Phi / dx_{i1}..dx_{ik} for ordinals ``indices``."""
        raise NotImplementedError

    def hess_apply_on(self, xc):
        """Fast Hess(x) matvec factory for a fixed point set.

        ``xc`` has shape (n, N); returns a callable mapping one-form
        component stacks (n, N) -> (n, N). Used inside iterative solvers.
        """
        raise NotImplementedError

    def coupled_groups(self):
        """Ordinal groups outside which partials of order >= 3 vanish."""
        raise NotImplementedError

    def site_delta(self, X, i, y):
        """Phi(X with column i replaced by y) - Phi(X), vectorized over rows."""
        raise NotImplementedError

    def _check_order(self, indices):
        if len(indices) > MAX_PARTIAL_ORDER:
            raise UnsupportedOrderError(
                f"partials of order {len(indices)} exceed the closed-form cap "
                f"({MAX_PARTIAL_ORDER})")


@dataclass(frozen=True)
class GaussianPotential(PotentialModel):
    lattice: LatticeSpec

    kind = "gaussian"

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(x * x, axis=-1)

    def grad(self, x):
        return np.array(x, dtype=float, copy=True)

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        n = self.lattice.n_sites
        eye = np.eye(n)
        return np.broadcast_to(eye, x.shape[:-1] + (n, n)).copy()

    def phi_laplacian(self, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], float(self.lattice.n_sites))

    def partial(self, indices, x):
        self._check_order(indices)
        x = np.asarray(x, dtype=float)
        base = x.shape[:-1]
        if len(indices) == 1:
            return np.array(x[..., indices[0]], copy=True)
        if len(indices) == 2:
            v = 1.0 if indices[0] == indices[1] else 0.0
            return np.full(base, v)
        return np.zeros(base)

    def hess_apply_on(self, xc):
        return lambda V: V.copy()

    def coupled_groups(self):
        return []

    def site_delta(self, X, i, y):
        xi = X[:, i]
        return 0.5 * (y * y - xi * xi)


@dataclass(frozen=True)
class KacPotential(PotentialModel):
    lattice: LatticeSpec
    nu: float

    kind = "kac"

    @property
    def coupling(self):
        """The per-bond argument scale sqrt(nu/2)."""
        return math.sqrt(self.nu / 2.0)

    def _bond_args(self, x):
        c = self.coupling
        return [(a, b, c * (x[..., a] + x[..., b])) for a, b in self.lattice.adjacency]

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        out = 0.5 * np.sum(x * x, axis=-1)
        for _, _, s in self._bond_args(x):
            out = out - 2.0 * _lncosh(s)
        return out

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        out = np.array(x, copy=True)
        c = self.coupling
        for a, b, s in self._bond_args(x):
            t = 2.0 * c * np.tanh(s)
            out[..., a] -= t
            out[..., b] -= t
        return out

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        n = self.lattice.n_sites
        out = np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n)).copy()
        for a, b, s in self._bond_args(x):
            w = self.nu * _sech2(s)
            out[..., a, a] -= w
            out[..., a, b] -= w
            out[..., b, a] -= w
            out[..., b, b] -= w
        return out

    def phi_laplacian(self, x):
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape[:-1], float(self.lattice.n_sites))
        for _, _, s in self._bond_args(x):
            out = out - 2.0 * self.nu * _sech2(s)
        return out

    def partial(self, indices, x):
        self._check_order(indices)
        x = np.asarray(x, dtype=float)
        base = x.shape[:-1]
        k = len(indices)
        if k == 1:
            out = np.array(x[..., indices[0]], copy=True)
        elif k == 2:
            out = np.full(base, 1.0 if indices[0] == indices[1] else 0.0)
        else:
            out = np.zeros(base)
        c = self.coupling
        wanted = set(indices)
        for a, b in self.lattice.adjacency:
            if wanted <= {a, b}:
                s = c * (x[..., a] + x[..., b])
                out = out + c ** k * _bond_chain_derivative(k, s)
        return out

    def hess_apply_on(self, xc):
        weights = []
        c = self.coupling
        for a, b in self.lattice.adjacency:
            s = c * (xc[a] + xc[b])
            weights.append((a, b, -self.nu * _sech2(s)))

        def apply(V):
            out = V.copy()
            for a, b, w in weights:
                t = w * (V[a] + V[b])
                out[a] += t
                out[b] += t
            return out

        return apply

    def coupled_groups(self):
        return [(a, b) for a, b in self.lattice.adjacency]

    def site_delta(self, X, i, y):
        xi = X[:, i]
        out = 0.5 * (y * y - xi * xi)
        c = self.coupling
        for a, b in self.lattice.adjacency:
            if a == i or b == i:
                other = X[:, b] if a == i else X[:, a]
                out = out - 2.0 * (_lncosh(c * (y + other)) - _lncosh(c * (xi + other)))
        return out


@dataclass(frozen=True)
class TiltedPotential(PotentialModel):
    """Phi_t = base - t*g for an observable g (the perturbed Hamiltonian)."""

    base: PotentialModel
    g: "Observable"
    t: float

    kind = "tilt"

    @property
    def lattice(self):
        return self.base.lattice

    def phi(self, x):
        return self.base.phi(x) - self.t * self.g.value(x)

    def grad(self, x):
        return self.base.grad(x) - self.t * self.g.grad(x)

    def hess(self, x):
        return self.base.hess(x) - self.t * self.g.hess(x)

    def phi_laplacian(self, x):
        return self.base.phi_laplacian(x) - self.t * self.g.hess_trace(x)

    def partial(self, indices, x):
        self._check_order(indices)
        return self.base.partial(indices, x) - self.t * self.g.partial(indices, x)

    def hess_apply_on(self, xc):
        base_apply = self.base.hess_apply_on(xc)
        g_apply = self.g.hess_apply_on(xc)
        t = self.t

        def apply(V):
            return base_apply(V) - t * g_apply(V)

        return apply

    def coupled_groups(self):
        groups = list(self.base.coupled_groups())
        if self.g.kind == "bump":
            groups.append(self.g.support.ordinals())
        return groups

    def site_delta(self, X, i, y):
        return self.base.site_delta(X, i, y) - self.t * self.g.site_delta(X, i, y)


@dataclass(frozen=True)
class Observable:
    """A smooth function of the spins with a declared lattice support.

    Kinds: ``coordinate`` (x_i), ``linear`` (sum h_i x_i), ``bump``
    (exp(-a |x_G - c|^2)), and the derived ``square`` (x_i^2) used as
    moment plumbing. Gradients vanish identically off the support columns.
    """

    lattice: LatticeSpec
    support: SiteSubset
    kind: str
    coefficients: tuple = ()     # linear: ((ordinal, h), ...)
    bump_center: tuple = ()      # bump: center per support ordinal
    bump_width: float = 0.0      # bump: the positive prefactor a

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "coordinate":
            return np.array(x[..., self._col()], copy=True)
        if self.kind == "square":
            return x[..., self._col()] ** 2
        if self.kind == "linear":
            out = np.zeros(x.shape[:-1])
            for a, h in self.coefficients:
                out = out + h * x[..., a]
            return out
        if self.kind == "bump":
            return np.exp(-self.bump_width * self._bump_r2(x))
        raise InvalidParameterError(f"unknown observable kind {self.kind!r}")

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        if self.kind == "coordinate":
            out[..., self._col()] = 1.0
        elif self.kind == "square":
            c = self._col()
            out[..., c] = 2.0 * x[..., c]
        elif self.kind == "linear":
            for a, h in self.coefficients:
                out[..., a] = h
        elif self.kind == "bump":
            g = self.value(x)
            b = 2.0 * self.bump_width
            for a, c in zip(self.support.ordinals(), self.bump_center):
                out[..., a] = -b * (x[..., a] - c) * g
        return out

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        n = self.lattice.n_sites
        out = np.zeros(x.shape[:-1] + (n, n))
        if self.kind == "square":
            c = self._col()
            out[..., c, c] = 2.0
        elif self.kind == "bump":
            g = self.value(x)
            b = 2.0 * self.bump_width
            cols = self.support.ordinals()
            for a, ca in zip(cols, self.bump_center):
                ua = x[..., a] - ca
                for bb, cb in zip(cols, self.bump_center):
                    ub = x[..., bb] - cb
                    out[..., a, bb] = (b * b * ua * ub - (b if a == bb else 0.0)) * g
        return out

    def hess_trace(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "square":
            return np.full(x.shape[:-1], 2.0)
        if self.kind == "bump":
            g = self.value(x)
            b = 2.0 * self.bump_width
            r2 = self._bump_r2(x)
            return (b * b * r2 - b * len(self.support)) * g
        return np.zeros(x.shape[:-1])

    def partial(self, indices, x):
        """Mixed partials up to order 4 (closed form, all kinds)."""
        if len(indices) > MAX_PARTIAL_ORDER:
            raise UnsupportedOrderError(
                f"observable partials capped at order {MAX_PARTIAL_ORDER}")
        x = np.asarray(x, dtype=float)
        base = x.shape[:-1]
        k = len(indices)
        if self.kind == "coordinate":
            if k == 1 and indices[0] == self._col():
                return np.ones(base)
            return np.zeros(base)
        if self.kind == "linear":
            if k == 1:
                h = dict(self.coefficients).get(indices[0], 0.0)
                return np.full(base, h)
            return np.zeros(base)
        if self.kind == "square":
            c = self._col()
            if k == 1 and indices[0] == c:
                return 2.0 * x[..., c]
            if k == 2 and indices == (c, c):
                return np.full(base, 2.0)
            return np.zeros(base)
        if self.kind == "bump":
            return self._bump_partial(indices, x)
        raise InvalidParameterError(f"unknown observable kind {self.kind!r}")

    def hess_apply_on(self, xc):
        n = self.lattice.n_sites
        if self.kind == "square":
            c = self._col()

            def apply_sq(V):
                out = np.zeros_like(V)
                out[c] = 2.0 * V[c]
                return out

            return apply_sq
        if self.kind == "bump":
            cols = self.support.ordinals()
            b = 2.0 * self.bump_width
            u = np.stack([xc[a] - ca for a, ca in zip(cols, self.bump_center)])
            g = np.exp(-self.bump_width * np.sum(u * u, axis=0))

            def apply_bump(V):
                out = np.zeros_like(V)
                w = sum(u[j] * V[a] for j, a in enumerate(cols))
                for j, a in enumerate(cols):
                    out[a] = g * (b * b * u[j] * w - b * V[a])
                return out

            return apply_bump

        def apply_zero(V):
            return np.zeros_like(V)

        return apply_zero

    def site_delta(self, X, i, y):
        """g(X with column i = y) - g(X), vectorized over rows of X."""
        if self.kind == "coordinate":
            return (y - X[:, i]) if i == self._col() else np.zeros(len(X))
        if self.kind == "square":
            if i == self._col():
                return y * y - X[:, i] ** 2
            return np.zeros(len(X))
        if self.kind == "linear":
            h = dict(self.coefficients).get(i, 0.0)
            return h * (y - X[:, i])
        X2 = np.array(X, copy=True)
        X2[:, i] = y
        return self.value(X2) - self.value(X)

    def _col(self):
        return self.support.ordinals()[0]

    def _bump_r2(self, x):
        r2 = np.zeros(x.shape[:-1])
        for a, c in zip(self.support.ordinals(), self.bump_center):
            u = x[..., a] - c
            r2 = r2 + u * u
        return r2

    def _bump_partial(self, indices, x):
        cols = self.support.ordinals()
        if any(i not in cols for i in indices):
            return np.zeros(x.shape[:-1])
        center = dict(zip(cols, self.bump_center))
        u = [x[..., i] - center[i] for i in indices]
        b = 2.0 * self.bump_width
        g = self.value(x)
        k = len(indices)
        if k == 1:
            return -b * u[0] * g
        if k == 2:
            d01 = 1.0 if indices[0] == indices[1] else 0.0
            return (b * b * u[0] * u[1] - b * d01) * g
        d = {(p, q): (1.0 if indices[p] == indices[q] else 0.0)
             for p in range(k) for q in range(k)}
        if k == 3:
            poly = (-b ** 3 * u[0] * u[1] * u[2]
                    + b * b * (d[0, 1] * u[2] + d[0, 2] * u[1] + d[1, 2] * u[0]))
            return poly * g
        # order 4: Hermite-type expansion in the shifted coordinates
        poly = b ** 4 * u[0] * u[1] * u[2] * u[3]
        poly -= b ** 3 * (d[0, 1] * u[2] * u[3] + d[0, 2] * u[1] * u[3]
                          + d[0, 3] * u[1] * u[2] + d[1, 2] * u[0] * u[3]
                          + d[1, 3] * u[0] * u[2] + d[2, 3] * u[0] * u[1])
        poly += b * b * (d[0, 1] * d[2, 3] + d[0, 2] * d[1, 3] + d[0, 3] * d[1, 2])
        return poly * g


def coordinate_observable(lattice: LatticeSpec, site) -> Observable:
    return Observable(lattice, SiteSubset(lattice, (site,)), "coordinate")


def square_observable(lattice: LatticeSpec, site) -> Observable:
    return Observable(lattice, SiteSubset(lattice, (site,)), "square")


def linear_observable(lattice: LatticeSpec, coefficients: dict) -> Observable:
    items = []
    for site, h in coefficients.items():
        if h != 0.0:
            items.append((lattice.ordinal(site), float(h)))
    if not items:
        raise InvalidParameterError("linear observable needs a nonzero coefficient")
    items.sort()
    sites = tuple(lattice.sites[a] for a, _ in items)
    return Observable(lattice, SiteSubset(lattice, sites), "linear",
                      coefficients=tuple(items))


def bump_observable(lattice: LatticeSpec, sites, center, width: float) -> Observable:
    if width <= 0:
        raise InvalidParameterError(f"bump width must be positive, got {width}")
    sub = SiteSubset(lattice, tuple(sites))
    center = tuple(float(c) for c in center)
    if len(center) != len(sub):
        raise InvalidParameterError("bump center length must match support size")
    return Observable(lattice, sub, "bump", bump_center=center, bump_width=float(width))


def gaussian_potential(lattice: LatticeSpec) -> PotentialModel:
    """Phi(x) = x^2/2: identity Hessian, vanishing higher partials."""
    return GaussianPotential(lattice)


def kac_potential(lattice: LatticeSpec, nu: float) -> PotentialModel:
    """Nearest-neighbor Kac model with coupling nu > 0.

    Warns (without rejecting) when nu >= 1/(4d): the uniform convexity
    margin 1 - 2*d*nu*... may vanish there.
    """
    if nu <= 0:
        raise InvalidParameterError(f"nu must be positive, got {nu}")
    if nu >= 1.0 / (4.0 * lattice.dimension):
        warnings.warn(f"nu={nu} >= 1/(4d); convexity margin may vanish",
                      stacklevel=2)
    return KacPotential(lattice, float(nu))


def tilt_potential(base: PotentialModel, g: Observable, t: float,
                   force: bool = False) -> PotentialModel:
    """Phi - t*g, guarded by the constructive convexity bound |t| < T."""
    if not force:
        T = tilt_bound(base, g)
        if abs(t) >= T:
            raise ConvexityRiskError(
                f"|t|={abs(t)} >= T={T:.4g}; pass force=True to override")
    return TiltedPotential(base, g, float(t))


def default_margin_samples(lattice: LatticeSpec, half_width: float = 6.0,
                           count: int = 32) -> np.ndarray:
    """Low-discrepancy points in the truncation box plus the origin."""
    from scipy.stats import qmc
    n = lattice.n_sites
    eng = qmc.Halton(d=n, scramble=False)
    pts = 2.0 * half_width * (eng.random(count) - 0.5)
    return np.vstack([np.zeros((1, n)), pts])


def convexity_margin(model: PotentialModel, weight: WeightFunction,
                     samples) -> float:
    """Sampled lower bound for the weighted-Hessian convexity constant.

    Returns min over samples of the smallest eigenvalue of the symmetrized
    M^-1 Hess(x) M with M = diag(rho). A certificate over the sample set
    only, not over all of R^Lambda.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.size == 0:
        raise InvalidParameterError("convexity_margin needs at least one sample")
    rho = weight.as_array()
    H = model.hess(samples)
    if not np.all(np.isfinite(H)):
        raise EvaluationError("non-finite Hessian entries in convexity_margin")
    A = H * (rho[None, None, :] / rho[None, :, None])
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    return float(np.linalg.eigvalsh(A)[..., 0].min())


@lru_cache(maxsize=64)
def default_convexity_margin(model: PotentialModel, half_width: float = 6.0) -> float:
    """convexity_margin with M = I over the default sample set (cached)."""
    from .lattice import WeightFunction as WF
    lat = model.lattice
    unit = WF(lat, {s: 1.0 for s in lat.sites}, 1.0)
    return convexity_margin(model, unit, default_margin_samples(lat, half_width))


@lru_cache(maxsize=64)
def tilt_bound(base: PotentialModel, g: Observable, half_width: float = 6.0) -> float:
    """Constructive T > 0 with |t| < T keeping the tilted model convex.

    T = margin / (1 + sup ||Hess g||_2), the sup taken over the default
    sample set.
    """
    margin = default_convexity_margin(base, half_width)
    if margin <= 0:
        raise ConvexityRiskError("base model has no sampled convexity margin")
    samples = default_margin_samples(base.lattice, half_width)
    H = g.hess(samples)
    sup = float(np.abs(np.linalg.eigvalsh(H)).max()) if H.size else 0.0
    return margin / (1.0 + sup)


def growth_condition_report(model: PotentialModel, k: int, kappa: float,
                            S: SiteSubset, samples) -> float:
    """Max over samples of the support-weighted square sum of the
    (k+1)-st partials of Phi.

    Only index tuples inside a coupled group (a Kac bond, or a bump
    support under tilt) can contribute; everything else vanishes in
    closed form.
    """
    if k < 2:
        raise InvalidParameterError(f"growth condition is defined for k >= 2, got {k}")
    if k + 1 > MAX_PARTIAL_ORDER:
        raise UnsupportedOrderError(
            f"growth report needs order {k + 1} partials; cap is {MAX_PARTIAL_ORDER}")
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    lat = model.lattice
    tuples = set()
    for group in model.coupled_groups():
        for tup in itertools.product(group, repeat=k + 1):
            tuples.add(tup)
    total = np.zeros(samples.shape[0])
    for tup in sorted(tuples):
        j, idx = tup[0], tup[1:]
        val = model.partial(tup, samples)
        dmin = min(set_distance(lat, lat.sites[i], S) for i in idx)
        total += val ** 2 * math.exp(2.0 * kappa * dmin)
    return float(total.max()) if total.size else 0.0


def proper_support_required(g: Observable):
    """Raise unless S_g is a proper subset of the lattice."""
    if len(g.support) >= g.lattice.n_sites:
        raise SupportError("observable support equals the whole lattice; "
                           "distance weights would be trivial")
