"""Permittivity reconstruction from time-domain boundary data of the electric field.

A hybrid finite-element / finite-difference Maxwell solver, its adjoint,
a projected conjugate-gradient Tikhonov inversion and adaptive local
mesh refinement.
"""

__version__ = "0.1.0"
