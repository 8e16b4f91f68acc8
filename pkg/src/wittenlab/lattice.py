"""Finite-lattice geometry: boxes in Z^d, graph distances, and the
exponential weight functions used by the decay estimates.

Sites are d-tuples of integers. A lattice is a full box given by per-axis
extents; adjacency is nearest-neighbor (l1-distance 1) with free boundary.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

from .errors import EmptySupportError, InvalidGeometryError, UnknownSiteError

Site = tuple[int, ...]


@dataclass(frozen=True)
class LatticeSpec:
    """A finite box in Z^d with nearest-neighbor adjacency.

    ``sites`` is ordered lexicographically; ``adjacency`` holds ordinal
    pairs (a, b) with a < b into that ordering.
    """

    dimension: int
    shape: tuple[int, ...]
    sites: tuple[Site, ...]
    adjacency: tuple[tuple[int, int], ...]
    _index: dict = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "_index",
                           {s: k for k, s in enumerate(self.sites)})

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    def ordinal(self, site) -> int:
        """Position of ``site`` in the canonical ordering."""
        s = _as_site(site, self.dimension)
        try:
            return self._index[s]
        except KeyError:
            raise UnknownSiteError(f"site {s} not in lattice of shape {self.shape}")

    def contains(self, site) -> bool:
        try:
            return _as_site(site, self.dimension) in self._index
        except UnknownSiteError:
            return False

    def neighbor_lists(self) -> list[list[int]]:
        """Per-ordinal lists of adjacent ordinals."""
        nbrs: list[list[int]] = [[] for _ in self.sites]
        for a, b in self.adjacency:
            nbrs[a].append(b)
            nbrs[b].append(a)
        return nbrs


@dataclass(frozen=True)
class SiteSubset:
    """A nonempty-by-use subset of a lattice's sites (a lattice support)."""

    parent: LatticeSpec
    members: tuple[Site, ...]

    def __post_init__(self):
        seen = []
        for s in self.members:
            t = _as_site(s, self.parent.dimension)
            if not self.parent.contains(t):
                raise UnknownSiteError(f"support site {t} not in lattice")
            if t not in seen:
                seen.append(t)
        object.__setattr__(self, "members", tuple(seen))

    def ordinals(self) -> tuple[int, ...]:
        return tuple(self.parent.ordinal(s) for s in self.members)

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class WeightFunction:
    """A positive site weight rho with the adjacent-ratio (Lipschitz) bound.

    Adjacent sites must satisfy exp(-lambda) <= rho(i)/rho(j) <= exp(lambda).
    """

    lattice: LatticeSpec
    values: dict
    lipschitz_lambda: float

    def __post_init__(self):
        if self.lipschitz_lambda <= 0:
            raise InvalidGeometryError("lipschitz_lambda must be positive")
        for s in self.lattice.sites:
            if s not in self.values:
                raise UnknownSiteError(f"weight undefined at site {s}")
            if not (self.values[s] > 0):
                raise InvalidGeometryError(f"weight at {s} is not positive")
        bound = math.exp(self.lipschitz_lambda) * (1 + 1e-12)
        for a, b in self.lattice.adjacency:
            r = self.values[self.lattice.sites[a]] / self.values[self.lattice.sites[b]]
            if r > bound or r < 1.0 / bound:
                raise InvalidGeometryError(
                    f"adjacent ratio {r} violates the exp(+/-lambda) bound")

    def as_array(self):
        import numpy as np
        return np.array([self.values[s] for s in self.lattice.sites])


def _as_site(site, dimension: int) -> Site:
    try:
        site = tuple(site)
    except TypeError:
        site = (site,)
    site = tuple(int(c) for c in site)
    if len(site) != dimension:
        raise UnknownSiteError(f"site {site} has wrong dimension (want {dimension})")
    return site


def build_lattice(dimension: int, shape) -> LatticeSpec:
    """Enumerate the box prod_k {0..shape[k]-1} and its nearest-neighbor pairs."""
    if dimension < 1:
        raise InvalidGeometryError(f"dimension must be >= 1, got {dimension}")
    shape = tuple(int(e) for e in shape)
    if len(shape) != dimension:
        raise InvalidGeometryError(
            f"shape {shape} does not match dimension {dimension}")
    if any(e < 1 for e in shape):
        raise InvalidGeometryError(f"all extents must be >= 1, got {shape}")

    sites = tuple(itertools.product(*(range(e) for e in shape)))
    index = {s: k for k, s in enumerate(sites)}
    pairs = []
    for k, s in enumerate(sites):
        for ax in range(dimension):
            nb = s[:ax] + (s[ax] + 1,) + s[ax + 1:]
            if nb in index:
                pairs.append((k, index[nb]))
    return LatticeSpec(dimension, shape, sites, tuple(sorted(pairs)))


def graph_distance(lattice: LatticeSpec, i, j) -> int:
    """l1 distance between two sites of the box (the graph metric)."""
    a = _as_site(i, lattice.dimension)
    b = _as_site(j, lattice.dimension)
    for s in (a, b):
        if not lattice.contains(s):
            raise UnknownSiteError(f"site {s} not in lattice")
    return sum(abs(p - q) for p, q in zip(a, b))


def set_distance(lattice: LatticeSpec, i, S: SiteSubset) -> int:
    """min over j in S of graph_distance(i, j)."""
    if len(S) == 0:
        raise EmptySupportError("set distance against an empty support")
    return min(graph_distance(lattice, i, j) for j in S.members)


def exponential_weight(lattice: LatticeSpec, kappa: float, S: SiteSubset) -> WeightFunction:
    """rho(i) = exp(kappa * d(i, S)); Lipschitz constant kappa.

    Since |d(i,S) - d(j,S)| <= 1 for adjacent i~j, the adjacent-ratio bound
    holds with lambda = kappa exactly.
    """
    if kappa <= 0:
        raise InvalidGeometryError(f"kappa must be positive, got {kappa}")
    values = {s: math.exp(kappa * set_distance(lattice, s, S))
              for s in lattice.sites}
    return WeightFunction(lattice, values, kappa)


def multi_index_weight(lattice: LatticeSpec, kappa: float, sites, S: SiteSubset) -> float:
    """exp(kappa * d({i1..ik}, S)), computed on demand (never tabulated)."""
    dmin = min(set_distance(lattice, s, S) for s in sites)
    return math.exp(kappa * dmin)
