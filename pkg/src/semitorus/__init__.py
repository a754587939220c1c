"""Semiclassical toolkit on the flat torus: random mesoscopic perturbations,
noisy propagation, Egorov checks, Lagrangian decompositions and sup-norm
statistics."""

__version__ = "0.1.0"
