"""Support for python -m future_sde_solver."""

from future_sde_solver.cli import main

main()
