"""Tests for the Cole-Hopf substitution."""

from __future__ import annotations

import math

import numpy as np
import pytest

from future_sde_solver.models.catalog import build_problem
from future_sde_solver.models.errors import PositivityError, ProblemError
from future_sde_solver.models.fd_oracle import fd_solve
from future_sde_solver.models.feynman_kac import PsiField
from future_sde_solver.models.lattice import Lattice, TimeGrid
from future_sde_solver.models.transforms import (
    KpzProblem,
    base_problem,
    build_direct_problem,
    build_transformed_problem,
    cole_hopf,
    invert_solution,
    phi_beta,
)

LATTICE = Lattice((8,))


def _kpz(**params) -> KpzProblem:
    return build_problem("kpz", params)


def _field(values: np.ndarray, gradients: np.ndarray | None = None) -> PsiField:
    grid = TimeGrid(0.1, values.shape[0] - 1)
    return PsiField(grid, LATTICE, values, np.full_like(values, 0.01), gradients)


# ---------------------------------------------------------------------------
# phi_beta
# ---------------------------------------------------------------------------

class TestPhiBeta:
    def test_zero_maps_to_zero(self):
        assert phi_beta(np.array([0.0]), 2.0)[0] == 0.0

    def test_known_value(self):
        assert phi_beta(np.array([math.log(2.0)]), 1.0)[0] == pytest.approx(0.5, abs=1e-15)

    def test_beta_zero_is_identity(self):
        u = np.array([-1.0, 0.5, 3.0])
        out = phi_beta(u, 0.0)
        assert np.array_equal(out, u)
        assert out is not u

    def test_small_beta_limit(self):
        u = np.linspace(0.5, 2.0, 7)
        assert np.all(np.abs(phi_beta(u, 1e-8) - u) <= 1e-7 * u**2)

    def test_strictly_increasing(self):
        u = np.linspace(-5.0, 5.0, 101)
        assert np.all(np.diff(phi_beta(u, 0.7)) > 0)

    def test_sign_symmetry(self):
        u = np.linspace(-2.0, 2.0, 9)
        assert phi_beta(-u, -1.5) == pytest.approx(-phi_beta(u, 1.5))

    def test_clamped_exponent_stays_finite(self):
        assert np.isfinite(phi_beta(np.array([-1e6]), 1.0)).all()

    def test_cole_hopf_round_trip(self):
        u = np.array([-0.3, 0.0, 0.8])
        assert -np.log(cole_hopf(u, 2.0)) / 2.0 == pytest.approx(u, abs=1e-15)


# ---------------------------------------------------------------------------
# Problem construction
# ---------------------------------------------------------------------------

class TestProblems:
    def test_kpz_rejects_non_finite_beta(self):
        with pytest.raises(ProblemError):
            _kpz(beta=math.inf)

    def test_transformed_problem(self):
        kpz = _kpz(beta=2.0, amplitude=0.0, potential=0.5)
        spec = build_transformed_problem(kpz)
        coords = LATTICE.coords
        assert spec.name == "kpz-cole-hopf"
        assert spec.cole_hopf_beta == 2.0
        assert np.array_equal(spec.initial_at(coords), np.ones((8, 1)))
        expected = -2.0 * 0.5 * np.cos(2 * math.pi * coords[:, 0])
        assert spec.potential_at(0.0, coords) == pytest.approx(expected)
        assert not spec.source_at(0.0, coords).any()
        assert not spec.nonlinearity_at(0.0, coords, np.ones((8, 1)), np.ones((8, 1, 1))).any()

    def test_transformed_needs_beta(self):
        with pytest.raises(ProblemError):
            build_transformed_problem(_kpz(beta=0.0))

    def test_direct_problem_source(self):
        kpz = _kpz(beta=1.5, potential=0.0)
        spec = build_direct_problem(kpz)
        assert not spec.spatial_source
        x = np.array([[0.2]])
        r2 = np.full((1, 1, 1), 2.0)
        out = spec.source_at(0.0, x, np.zeros((1, 1)), r2, np.zeros((1, 1, 1, 1)))
        assert out[0, 0] == pytest.approx(-1.5 * 0.5 * 4.0)

    def test_direct_with_zero_beta_is_base(self):
        spec = build_direct_problem(_kpz(beta=0.0))
        assert spec.spatial_source
        assert spec.cole_hopf_beta is None

    def test_base_problem_needs_zero_beta(self):
        with pytest.raises(ProblemError):
            base_problem(_kpz(beta=1.0))

    def test_navier_stokes_base(self):
        spec = base_problem(build_problem("navier-stokes", dim=2))
        coords = Lattice((4, 4)).coords
        assert spec.dim_m == 2
        r1 = np.ones((16, 2))
        transport = spec.nonlinearity_at(0.0, coords, r1, np.zeros((16, 2, 2)))
        assert np.array_equal(transport, -r1)
        assert not spec.potential_at(0.0, coords).any()


# ---------------------------------------------------------------------------
# Inversion
# ---------------------------------------------------------------------------

class TestInvert:
    def test_unit_field_inverts_to_zero(self):
        u = invert_solution(_field(np.ones((3, 8, 1))), 2.0)
        assert not u.values.any()
        assert u.provenance.endswith("+cole-hopf")

    def test_known_value(self):
        u = invert_solution(_field(np.full((3, 8, 1), math.exp(-0.5))), 0.5)
        assert u.values == pytest.approx(np.ones((3, 8, 1)))

    def test_round_trip(self):
        beta = 0.7
        original = np.random.default_rng(2).normal(scale=0.3, size=(3, 8, 1))
        u = invert_solution(_field(cole_hopf(original, beta)), beta)
        assert u.values == pytest.approx(original, abs=1e-12)

    def test_gradients_and_stderr_carried(self):
        v = np.full((3, 8, 1), 0.5)
        grads = np.full((3, 8, 1, 1), 0.2)
        u = invert_solution(_field(v, grads), 2.0)
        assert u.gradients == pytest.approx(np.full((3, 8, 1, 1), -0.2 / (2.0 * 0.5)))
        assert u.stderr == pytest.approx(np.full((3, 8, 1), 0.01 / (2.0 * 0.5)))

    def test_lost_positivity(self):
        v = np.ones((3, 8, 1))
        v[2, 5, 0] = -0.1
        with pytest.raises(PositivityError) as exc_info:
            invert_solution(_field(v), 1.0)
        assert exc_info.value.location == (2, 5)

    def test_zero_beta(self):
        with pytest.raises(ProblemError):
            invert_solution(_field(np.ones((3, 8, 1))), 0.0)

    def test_fd_solutions_agree_through_the_transform(self):
        kpz = _kpz(amplitude=0.3)
        lattice = Lattice((32,))
        grid = TimeGrid(kpz.base.horizon, 200)
        direct = fd_solve(build_direct_problem(kpz), lattice, grid)
        transformed = invert_solution(fd_solve(build_transformed_problem(kpz), lattice, grid), kpz.beta)
        scale = np.abs(direct.values).max()
        assert np.abs(direct.values - transformed.values).max() <= 0.05 * scale
