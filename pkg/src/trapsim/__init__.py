"""Random walks in heavy-tailed trap environments on the discrete torus."""

__version__ = "0.1.0"
