"""Euler scheme for path-dependent SDEs with exact Malliavin calculus on the
discretised Wiener space, integration-by-parts density estimators and
convergence-rate studies."""

__version__ = "0.1.0"
