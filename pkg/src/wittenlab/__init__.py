"""wittenlab: a numerical laboratory for Witten-Laplacian solvers on
finite-lattice unbounded spin systems of Kac type.

Solves the zero- and one-form elliptic equations on tensor-product grids,
computes Gibbs covariances and truncated correlations, checks weighted
exponential-decay estimates, and evaluates pressure Taylor coefficients by
the inverse-operator recursion, everything cross-checked against dense,
quadrature, finite-difference, and Monte Carlo oracles.
"""

__version__ = "0.1.0"
