"""future-sde-solver: semilinear parabolic PDEs through a future-distribution-dependent SDE."""

from future_sde_solver.__about__ import __version__

__all__ = ["__version__"]
