"""Numerical models: problem data, engines, estimators, oracles and I/O."""
