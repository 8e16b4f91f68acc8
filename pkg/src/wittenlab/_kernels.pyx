# cython: boundscheck=False, wraparound=False, cdivision=True, nonecheck=False
"""Compiled hot loops: fused stencil application and Metropolis sweeps.

Mirrors the numpy fallbacks in wittenlab.kernels; both consume the same
random streams so they are statistically interchangeable.
"""

from libc.math cimport exp, fabs, log1p

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef double LN2 = 0.6931471805599453094172321214581766


cdef inline double lncosh(double s) nogil:
    cdef double a = fabs(s)
    return a + log1p(exp(-2.0 * a)) - LN2


def stencil_apply(double[::1] u, double[::1] out, int n_axes, int m,
                  double inv_h2, double lap_sign, pot_obj, int order):
    """out = lap_sign * Laplacian(u) [+ pot*u when pot_obj is not None].

    Dirichlet-0 ghosts outside the box. order selects the 3-point or the
    5-point per-axis second-derivative stencil.
    """
    cdef Py_ssize_t N = u.shape[0]
    cdef Py_ssize_t idx
    cdef int k, c
    cdef long stride
    cdef long[64] strides
    cdef double acc, diag, c1, c2
    cdef double[::1] pot
    cdef bint has_pot = pot_obj is not None
    cdef bint wide = order == 4
    if has_pot:
        pot = pot_obj

    stride = 1
    for k in range(n_axes - 1, -1, -1):
        strides[k] = stride
        stride *= m

    if wide:
        diag = -30.0 / 12.0 * n_axes * inv_h2 * lap_sign
        c1 = 16.0 / 12.0 * inv_h2 * lap_sign
        c2 = -1.0 / 12.0 * inv_h2 * lap_sign
    else:
        diag = -2.0 * n_axes * inv_h2 * lap_sign
        c1 = inv_h2 * lap_sign
        c2 = 0.0
    with nogil:
        for idx in range(N):
            acc = diag * u[idx]
            for k in range(n_axes):
                c = <int>((idx / strides[k]) % m)
                if c > 0:
                    acc += c1 * u[idx - strides[k]]
                if c < m - 1:
                    acc += c1 * u[idx + strides[k]]
                if wide:
                    if c > 1:
                        acc += c2 * u[idx - 2 * strides[k]]
                    if c < m - 2:
                        acc += c2 * u[idx + 2 * strides[k]]
            if has_pot:
                acc += pot[idx] * u[idx]
            out[idx] = acc


def metropolis_block(double[:, ::1] X, double nu, int[::1] nbr_idx,
                     int[::1] nbr_ptr, double[::1] lin, double[::1] quad,
                     double[:, :, ::1] normals, double[:, :, ::1] logu,
                     double prop_std, int thin,
                     double[:, :, ::1] states):
    """Systematic single-site Metropolis sweeps over all chains.

    Energy model: dPhi = (0.5 + quad_i)(y^2 - x^2) + lin_i (y - x)
    - 2 sum_{j~i} [lncosh(c(y + x_j)) - lncosh(c(x + x_j))], c = sqrt(nu/2).
    X is (chains, n) and updated in place; a state snapshot is written
    every `thin` sweeps. Returns the number of accepted proposals.
    """
    cdef Py_ssize_t sweeps = normals.shape[0]
    cdef Py_ssize_t n = normals.shape[1]
    cdef Py_ssize_t chains = normals.shape[2]
    cdef Py_ssize_t s, i, c, p, k
    cdef double xi, y, d, xj, cc
    cdef long accepted = 0
    cdef bint has_bonds = nu > 0.0

    cc = (nu / 2.0) ** 0.5
    k = 0
    with nogil:
        for s in range(sweeps):
            for i in range(n):
                for c in range(chains):
                    xi = X[c, i]
                    y = xi + prop_std * normals[s, i, c]
                    d = (0.5 + quad[i]) * (y * y - xi * xi) + lin[i] * (y - xi)
                    if has_bonds:
                        for p in range(nbr_ptr[i], nbr_ptr[i + 1]):
                            xj = X[c, nbr_idx[p]]
                            d -= 2.0 * (lncosh(cc * (y + xj))
                                        - lncosh(cc * (xi + xj)))
                    if logu[s, i, c] < -d:
                        X[c, i] = y
                        accepted += 1
            if (s + 1) % thin == 0:
                for c in range(chains):
                    for i in range(n):
                        states[k, c, i] = X[c, i]
                k += 1
    return accepted
