"""2D arbitrary Lagrangian-Eulerian discontinuous Galerkin solver.

Scalar conservation laws and compressible Euler on moving triangular
meshes, with geometric-conservation-law-exact Runge-Kutta stepping and a
bound-preserving limiter.
"""

__version__ = "0.1.0"
