"""Numerical laboratory for facet monotonicity of harmonic fields on
rectangular annuli: mixed Neumann/Dirichlet Laplace solves, dual singular
solutions, corner-coefficient extraction, and monotonicity diagnostics."""

__version__ = "0.1.0"

from .geometry import make_domain, DomainSpec  # noqa: F401
