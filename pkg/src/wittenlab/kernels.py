"""Hot inner loops, with an optional compiled core.

Two kernel families dominate runtime: the (2n+1)-point stencil applied
inside every conjugate-gradient iteration, and the single-site Metropolis
sweep. Both exist here as vectorized numpy code; when the Cython extension
``wittenlab._kernels`` was built, it is selected at import. Set
``WITTENLAB_PURE=1`` to force the numpy path (used by the benchmark and by
the kernel parity tests).

Both backends consume identical random-number streams, so they sample the
same proposal sequences; tiny last-ulp differences in transcendental
functions mean chain trajectories are only statistically, not bitwise,
identical across backends. Within one backend, results are deterministic
given the seed.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from . import _kernels as _ext
except ImportError:          # extension not built; numpy fallback below
    _ext = None

FORCE_PURE = os.environ.get("WITTENLAB_PURE", "0") not in ("", "0")
COMPILED = (_ext is not None) and not FORCE_PURE


def backend() -> str:
    return "compiled" if COMPILED else "numpy"


# ---------------------------------------------------------------- stencils

def _axis_strides(n_axes: int, m: int) -> list[int]:
    return [m ** (n_axes - 1 - k) for k in range(n_axes)]


def laplacian_apply(values: np.ndarray, n_axes: int, m: int, inv_h2: float,
                    order: int = 2, force_numpy: bool = False) -> np.ndarray:
    """Axis-stencil Laplacian with Dirichlet-0 ghosts outside the box.

    order=2 is the standard (2n+1)-point stencil; order=4 the 5-point-per-
    axis stencil (still symmetric positive semidefinite under zero ghosts).
    """
    if COMPILED and not force_numpy:
        out = np.empty_like(values)
        _ext.stencil_apply(values, out, n_axes, m, inv_h2, 1.0, None, order)
        return out
    return _laplacian_numpy(values, n_axes, m, inv_h2, order)


def w0_apply(values: np.ndarray, pot: np.ndarray, n_axes: int, m: int,
             inv_h2: float, order: int = 2, force_numpy: bool = False) -> np.ndarray:
    """-Laplacian(u) + pot*u in one fused pass."""
    if COMPILED and not force_numpy:
        out = np.empty_like(values)
        _ext.stencil_apply(values, out, n_axes, m, inv_h2, -1.0, pot, order)
        return out
    return -_laplacian_numpy(values, n_axes, m, inv_h2, order) + pot * values


def _laplacian_numpy(values, n_axes, m, inv_h2, order=2):
    U = values.reshape((m,) * n_axes)

    def shifted(ax, dist, sign):
        # add U shifted by +-dist along ax into out, zero-padded
        lo = tuple(slice(None) if k != ax else slice(0, m - dist)
                   for k in range(n_axes))
        hi = tuple(slice(None) if k != ax else slice(dist, m)
                   for k in range(n_axes))
        out[lo] += sign * U[hi]
        out[hi] += sign * U[lo]

    if order == 2:
        out = -2.0 * n_axes * U
        for ax in range(n_axes):
            shifted(ax, 1, 1.0)
        return (out * inv_h2).reshape(-1)
    if order == 4:
        out = (-30.0 / 12.0) * n_axes * U
        for ax in range(n_axes):
            shifted(ax, 1, 16.0 / 12.0)
            shifted(ax, 2, -1.0 / 12.0)
        return (out * inv_h2).reshape(-1)
    raise ValueError(f"unsupported stencil order {order}")


# --------------------------------------------------------------- sampling

def pack_single_site_model(model):
    """Closed-form single-site energy parameters, or None if unsupported.

    Supported: gaussian, kac, and tilts of those by coordinate / linear /
    square observables. The packed form is
    dPhi = (0.5 + quad_i)(y^2 - x_i^2) + lin_i (y - x_i) + Kac bond terms.
    """
    n = model.lattice.n_sites
    lin = np.zeros(n)
    quad = np.zeros(n)
    base = model
    if getattr(model, "kind", None) == "tilt":
        g, t = model.g, model.t
        if g.kind in ("coordinate", "linear"):
            for a, h in (g.coefficients or ((g.support.ordinals()[0], 1.0),)):
                lin[a] -= t * h
        elif g.kind == "square":
            quad[g.support.ordinals()[0]] -= t
        else:
            return None
        base = model.base
    if base.kind == "gaussian":
        nu = 0.0
        nbr_idx = np.zeros(0, dtype=np.int32)
        nbr_ptr = np.zeros(n + 1, dtype=np.int32)
    elif base.kind == "kac":
        nu = base.nu
        lists = base.lattice.neighbor_lists()
        nbr_ptr = np.zeros(n + 1, dtype=np.int32)
        flat = []
        for i, lst in enumerate(lists):
            flat.extend(lst)
            nbr_ptr[i + 1] = len(flat)
        nbr_idx = np.asarray(flat, dtype=np.int32)
    else:
        return None
    return nu, nbr_idx, nbr_ptr, lin, quad


def metropolis_block(model, X: np.ndarray, normals: np.ndarray,
                     logu: np.ndarray, prop_std: float, thin: int,
                     force_numpy: bool = False):
    """Advance all chains by ``sweeps`` systematic single-site sweeps.

    X has shape (chains, n) and is updated in place. ``normals`` and
    ``logu`` have shape (sweeps, n, chains). Returns (states, accepted)
    where states holds a snapshot every ``thin`` sweeps.
    """
    sweeps, n, chains = normals.shape
    kept = sweeps // thin
    states = np.empty((kept, chains, n))
    pack = pack_single_site_model(model)
    if COMPILED and pack is not None and not force_numpy:
        nu, nbr_idx, nbr_ptr, lin, quad = pack
        accepted = _ext.metropolis_block(X, float(nu), nbr_idx, nbr_ptr, lin,
                                         quad, normals, logu, float(prop_std),
                                         int(thin), states)
        return states, int(accepted)
    return _metropolis_numpy(model, X, normals, logu, prop_std, thin, states)


def _metropolis_numpy(model, X, normals, logu, prop_std, thin, states):
    sweeps, n, _ = normals.shape
    accepted = 0
    k = 0
    for s in range(sweeps):
        for i in range(n):
            y = X[:, i] + prop_std * normals[s, i]
            delta = model.site_delta(X, i, y)
            acc = logu[s, i] < -delta
            X[acc, i] = y[acc]
            accepted += int(np.count_nonzero(acc))
        if (s + 1) % thin == 0:
            states[k] = X
            k += 1
    return states, accepted
