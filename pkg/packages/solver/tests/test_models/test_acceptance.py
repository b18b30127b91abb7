"""Desk-scale end-to-end runs: 64 nodes, 200 steps, 10^4 particles per node."""

from __future__ import annotations

import pytest

from future_sde_solver.models.config import RunConfig, SolverConfig
from future_sde_solver.report import EXIT_PASS, run_compare, run_kpz

pytestmark = pytest.mark.slow


def _config(tmp_path, problem: str, gate: float, **params) -> RunConfig:
    return RunConfig(
        seed=20240611,
        problem=problem,
        params=params,
        output_dir=tmp_path / problem,
        gate=gate,
        solver=SolverConfig(particles=10_000, nodes=64, n_steps=200, workers=8),
    )


def _manifest(config: RunConfig) -> dict[str, str]:
    results = {}
    for line in (config.output_dir / "manifest.txt").read_text(encoding="utf-8").splitlines():
        if line.startswith("# ") and " = " in line:
            key, value = line[2:].split(" = ", 1)
            results[key] = value
    return results


def test_heat_correspondence(tmp_path):
    config = _config(tmp_path, "heat", 0.02)
    assert run_compare(config) == EXIT_PASS


def test_constant_potential(tmp_path):
    config = _config(tmp_path, "constant-potential", 0.02)
    assert run_compare(config) == EXIT_PASS


def test_nonlinear_fixed_point(tmp_path):
    config = _config(tmp_path, "nonlinear", 0.05)
    assert run_compare(config) == EXIT_PASS
    results = _manifest(config)
    assert int(results["mc.iterations"]) <= 10
    assert results["mc.fk_bound_holds"] == "true"
    rows = (config.output_dir / "diagnostics.csv").read_text(encoding="utf-8").splitlines()[1:]
    ratios = [float(row.split(",")[3]) for row in rows[3:] if row.split(",")[3]]
    assert all(r <= 0.8 for r in ratios)


def test_outer_map(tmp_path):
    config = _config(tmp_path, "outer", 0.05, alpha=0.05)
    assert run_compare(config) == EXIT_PASS


def test_cole_hopf(tmp_path):
    config = _config(tmp_path, "kpz", 0.05)
    assert run_kpz(config) == EXIT_PASS
