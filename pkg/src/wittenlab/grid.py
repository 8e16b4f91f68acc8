"""Tensor-product discretization of the truncated phase space [-L, L]^Lambda.

Fields are stored flat in row-major order over the lattice's site
ordering; node k of axis j sits at -L + k*h with h = 2L/(m-1). m is odd so
the origin is a grid node. Quadrature is trapezoidal, which is effectively
spectrally accurate for the rapidly decaying Gibbs-weighted integrands
handled here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import (EvaluationError, InvalidGridError, ResourceLimitError,
                     ShapeMismatchError)
from .lattice import LatticeSpec
from .potential import PotentialModel

# budget in float64 entries for N * (|Lambda| + 2) working fields
DEFAULT_MEMORY_BUDGET = 64 * 2 ** 20

GIBBS_MASK_FLOOR = 1e-12


@dataclass(frozen=True)
class GridSpec:
    lattice: LatticeSpec
    half_width: float
    points_per_site: int

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / (self.points_per_site - 1)

    @property
    def total_points(self) -> int:
        return self.points_per_site ** self.lattice.n_sites

    @property
    def n_sites(self) -> int:
        return self.lattice.n_sites


@dataclass
class ScalarField:
    grid: GridSpec
    values: np.ndarray
    masked: bool = False    # masked fields may carry NaN off the Gibbs mask

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.values.shape != (self.grid.total_points,):
            raise ShapeMismatchError(
                f"field length {self.values.shape} != N={self.grid.total_points}")
        if not self.masked and not np.all(np.isfinite(self.values)):
            raise EvaluationError("scalar field contains non-finite entries")


@dataclass
class OneFormField:
    grid: GridSpec
    components: tuple

    def __post_init__(self):
        if len(self.components) != self.grid.n_sites:
            raise ShapeMismatchError("one-form needs one component per site")
        for c in self.components:
            if c.grid != self.grid:
                raise ShapeMismatchError("one-form components on mixed grids")

    def stack(self) -> np.ndarray:
        return np.stack([c.values for c in self.components])


def one_form_from_stack(grid: GridSpec, arr: np.ndarray) -> OneFormField:
    return OneFormField(grid, tuple(ScalarField(grid, arr[i])
                                    for i in range(grid.n_sites)))


@dataclass
class GroundDensity:
    """exp(-Phi/2) on the grid together with the quadrature of its square
    (the box-restricted partition function)."""
    field: ScalarField
    norm_sq: float


def build_grid(lattice: LatticeSpec, L: float, m: int,
               memory_budget: int = DEFAULT_MEMORY_BUDGET) -> GridSpec:
    if L <= 0:
        raise InvalidGridError(f"half-width must be positive, got {L}")
    m = int(m)
    if m < 5 or m % 2 == 0:
        raise InvalidGridError(f"points_per_site must be odd and >= 5, got {m}")
    need = m ** lattice.n_sites * (lattice.n_sites + 2)
    if need > memory_budget:
        raise ResourceLimitError(
            f"grid needs {need} field entries > budget {memory_budget}")
    return GridSpec(lattice, float(L), m)


def default_grid(lattice: LatticeSpec) -> GridSpec:
    """The desk-scale defaults: L=6, m=33 up to three sites, then a
    coarser L=5 box chosen by memory doubling per added site."""
    n = lattice.n_sites
    if n <= 3:
        return build_grid(lattice, 6.0, 33)
    m = {4: 13, 5: 11, 6: 9}.get(n)
    if m is None:
        raise ResourceLimitError(f"no default grid beyond 6 sites (got {n})")
    return build_grid(lattice, 5.0, m)


def axis_nodes(grid: GridSpec) -> np.ndarray:
    return np.linspace(-grid.half_width, grid.half_width, grid.points_per_site)


@lru_cache(maxsize=8)
def coords(grid: GridSpec) -> np.ndarray:
    """Node coordinates, shape (N, n), row-major over axes."""
    n, m = grid.n_sites, grid.points_per_site
    ax = axis_nodes(grid)
    out = np.empty((grid.total_points, n))
    for k in range(n):
        shape = [1] * n
        shape[k] = m
        out[:, k] = np.broadcast_to(ax.reshape(shape), (m,) * n).reshape(-1)
    return out


@lru_cache(maxsize=8)
def quad_weights(grid: GridSpec) -> np.ndarray:
    """Trapezoidal tensor-product quadrature weights, shape (N,)."""
    m, h = grid.points_per_site, grid.spacing
    w1 = np.full(m, h)
    w1[0] = w1[-1] = h / 2.0
    out = np.array([1.0])
    for _ in range(grid.n_sites):
        out = np.multiply.outer(out, w1).reshape(-1)
    return out


def sample_scalar(grid: GridSpec, fn) -> ScalarField:
    """Sample a point function on every node; errors name the bad node."""
    x = coords(grid)
    try:
        vals = np.asarray(fn(x), dtype=float).reshape(-1)
        if vals.shape != (grid.total_points,):
            raise TypeError
    except (TypeError, ValueError):
        vals = np.array([float(fn(row)) for row in x])
    bad = ~np.isfinite(vals)
    if bad.any():
        where = x[int(np.argmax(bad))]
        raise EvaluationError(f"non-finite sample at node {tuple(where)}")
    return ScalarField(grid, vals)


@lru_cache(maxsize=16)
def phi_field(model: PotentialModel, grid: GridSpec) -> np.ndarray:
    vals = model.phi(coords(grid))
    if not np.all(np.isfinite(vals)):
        raise EvaluationError("potential is not finite on the grid box")
    return vals


def gibbs_mask(model: PotentialModel, grid: GridSpec,
               floor: float = GIBBS_MASK_FLOOR) -> np.ndarray:
    """Nodes carrying Gibbs weight exp(-Phi) >= floor."""
    return phi_field(model, grid) <= -np.log(floor)


def ground_density(grid: GridSpec, model: PotentialModel) -> GroundDensity:
    phi = phi_field(model, grid)
    with np.errstate(over="raise"):
        try:
            vals = np.exp(-phi / 2.0)
        except FloatingPointError:
            raise EvaluationError("exp(-Phi/2) overflows on the box; "
                                  "Phi is too negative")
    f = ScalarField(grid, vals)
    norm_sq = float(np.sum(quad_weights(grid) * vals * vals))
    return GroundDensity(f, norm_sq)


def _diff_axis(U: np.ndarray, ax: int, h: float) -> np.ndarray:
    """Central difference along one axis, one-sided at the two faces."""
    out = np.empty_like(U)
    nd = U.ndim

    def sl(s):
        return tuple(s if k == ax else slice(None) for k in range(nd))

    out[sl(slice(1, -1))] = (U[sl(slice(2, None))] - U[sl(slice(0, -2))]) / (2.0 * h)
    out[sl(slice(0, 1))] = (U[sl(slice(1, 2))] - U[sl(slice(0, 1))]) / h
    out[sl(slice(-1, None))] = (U[sl(slice(-1, None))] - U[sl(slice(-2, -1))]) / h
    return out


def fd_gradient(field: ScalarField) -> OneFormField:
    """Second-order central differences; one-sided at the box faces."""
    g = field.grid
    U = field.values.reshape((g.points_per_site,) * g.n_sites)
    comps = tuple(ScalarField(g, _diff_axis(U, ax, g.spacing).reshape(-1),
                              masked=field.masked)
                  for ax in range(g.n_sites))
    return OneFormField(g, comps)


def _diff_axis_o4(U: np.ndarray, ax: int, h: float) -> np.ndarray:
    """Fourth-order central difference in the deep interior, degrading to
    the second-order scheme on the two layers nearest each face."""
    out = _diff_axis(U, ax, h)
    nd = U.ndim

    def sl(s):
        return tuple(s if k == ax else slice(None) for k in range(nd))

    out[sl(slice(2, -2))] = (U[sl(slice(0, -4))] - 8.0 * U[sl(slice(1, -3))]
                             + 8.0 * U[sl(slice(3, -1))]
                             - U[sl(slice(4, None))]) / (12.0 * h)
    return out


def fd_gradient_o4(field: ScalarField) -> OneFormField:
    """Solver-grade gradient: fourth-order interior accuracy.

    Used inside the pressure recursion and oracle pipelines where the
    acceptance tolerances require better than O(h^2); the public
    fd_gradient keeps the plain second-order scheme.
    """
    g = field.grid
    U = field.values.reshape((g.points_per_site,) * g.n_sites)
    comps = tuple(ScalarField(g, _diff_axis_o4(U, ax, g.spacing).reshape(-1),
                              masked=field.masked)
                  for ax in range(g.n_sites))
    return OneFormField(g, comps)


def fd_divergence(form: OneFormField) -> ScalarField:
    """Sum of the axis derivatives of the matching components (the negative
    adjoint of fd_gradient on interior-supported fields)."""
    g = form.grid
    m = g.points_per_site
    total = np.zeros(g.total_points)
    for ax in range(g.n_sites):
        U = form.components[ax].values.reshape((m,) * g.n_sites)
        total += _diff_axis(U, ax, g.spacing).reshape(-1)
    return ScalarField(g, total, masked=any(c.masked for c in form.components))


def fd_laplacian(field: ScalarField) -> ScalarField:
    """(2n+1)-point Laplacian, Dirichlet-0 ghost values outside the box."""
    g = field.grid
    out = kernels.laplacian_apply(field.values, g.n_sites, g.points_per_site,
                                  1.0 / g.spacing ** 2)
    return ScalarField(g, out)


def twisted_gradient(field: ScalarField, model: PotentialModel) -> OneFormField:
    """The half-density derivative D u = grad u + (grad Phi / 2) u.

    Annihilates exp(-Phi/2) up to O(h^2) and intertwines the weighted and
    unweighted pictures of the gradient.
    """
    g = field.grid
    grad_phi = model.grad(coords(g))
    base = fd_gradient(field)
    comps = tuple(ScalarField(g, base.components[i].values
                              + 0.5 * grad_phi[:, i] * field.values,
                              masked=field.masked)
                  for i in range(g.n_sites))
    return OneFormField(g, comps)


def inner_product(a, b) -> float:
    """Trapezoidal quadrature of the pointwise (dot) product."""
    if isinstance(a, ScalarField) and isinstance(b, ScalarField):
        if a.grid != b.grid:
            raise ShapeMismatchError("inner product across different grids")
        return float(np.sum(quad_weights(a.grid) * a.values * b.values))
    if isinstance(a, OneFormField) and isinstance(b, OneFormField):
        if a.grid != b.grid:
            raise ShapeMismatchError("inner product across different grids")
        w = quad_weights(a.grid)
        return float(sum(np.sum(w * ca.values * cb.values)
                         for ca, cb in zip(a.components, b.components)))
    raise ShapeMismatchError("inner product needs two fields of the same rank")


# ------------------------------------------------------------------ export

_MAGIC = b"WLF1"


def save_scalar_field(field: ScalarField, path) -> None:
    """Flat binary export: magic, |Lambda|, m, L, then row-major float64."""
    g = field.grid
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<iid", g.n_sites, g.points_per_site, g.half_width))
        fh.write(np.ascontiguousarray(field.values).tobytes())


def load_scalar_field(path, lattice: LatticeSpec) -> ScalarField:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise EvaluationError(f"{path} is not a wittenlab field file")
        n, m, L = struct.unpack("<iid", fh.read(16))
        if n != lattice.n_sites:
            raise ShapeMismatchError(f"field has {n} sites, lattice has "
                                     f"{lattice.n_sites}")
        vals = np.frombuffer(fh.read(), dtype=np.float64)
    grid = build_grid(lattice, L, m)
    return ScalarField(grid, np.array(vals), masked=bool(np.isnan(vals).any()))


def scalar_field_to_csv(field: ScalarField, path) -> None:
    """CSV export (node coordinates + value); only for |Lambda| <= 2."""
    g = field.grid
    if g.n_sites > 2:
        raise ResourceLimitError("CSV export supported only for |Lambda| <= 2")
    x = coords(g)
    with open(path, "w") as fh:
        fh.write(",".join(f"x{k}" for k in range(g.n_sites)) + ",value\n")
        for row, v in zip(x, field.values):
            fh.write(",".join(repr(float(c)) for c in row) + f",{v!r}\n")
