"""Boundary-integral electrocardiography on 2D torso sections.

Forward and regularised inverse solvers for the annular Laplace problem
between a fixed chest boundary and a moving pericardial boundary, plus
propagation of random pericardial shape deformations through both maps
with quasi-Monte Carlo and anisotropic sparse-grid quadrature.
"""

__version__ = "0.1.0"
