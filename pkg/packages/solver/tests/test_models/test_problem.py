"""Tests for problem data, mixed norms, bound constants and hypothesis probes."""

from __future__ import annotations

import math

import numpy as np
import pytest

from future_sde_solver.models.catalog import build_problem
from future_sde_solver.models.errors import ProblemError
from future_sde_solver.models.lattice import Lattice, TimeGrid
from future_sde_solver.models.problem import (
    KatoPair,
    TabulatedField,
    cb1_norm,
    ellipticity_bounds,
    fbar_field,
    k_constant,
    kato_class_check,
    probe_assumptions,
    tilde_Lpq_norm,
)

PAIR = KatoPair(8.0, 8.0)


# ---------------------------------------------------------------------------
# Kato pairs
# ---------------------------------------------------------------------------

class TestKatoClass:
    @pytest.mark.parametrize("d,p,q,expected", [
        (1, 8.0, 8.0, True),
        (3, 8.0, 8.0, True),
        (2, 4.0, 4.0, False),
        (1, 2.0, 8.0, False),
        (1, 8.0, 2.0, False),
        (3, 4.0, 8.0, False),
    ])
    def test_condition(self, d, p, q, expected):
        assert kato_class_check(d, KatoPair(p, q)) is expected
        assert KatoPair(p, q).admits(d) is expected

    def test_bad_dimension(self):
        with pytest.raises(ProblemError):
            kato_class_check(0, PAIR)


# ---------------------------------------------------------------------------
# ProblemSpec accessors
# ---------------------------------------------------------------------------

class TestProblemSpec:
    def test_validation(self):
        spec = build_problem("heat")
        with pytest.raises(ProblemError):
            spec.replace(dim_d=4)
        with pytest.raises(ProblemError):
            spec.replace(horizon=0.0)
        with pytest.raises(ProblemError):
            spec.replace(domain="sphere")

    def test_accessors_wrap_coordinates(self):
        spec = build_problem("nonlinear")
        x = np.array([[0.3], [0.7]])
        assert spec.potential_at(0.1, x + 1.0) == pytest.approx(spec.potential_at(0.1, x), abs=1e-12)
        assert spec.initial_at(x - 2.0) == pytest.approx(spec.initial_at(x), abs=1e-12)

    def test_accessors_broadcast(self):
        spec = build_problem("heat", dim=2)
        x = np.zeros((3, 4, 2))
        assert spec.diffusion_at(0.0, x).shape == (3, 4, 2, 2)
        assert spec.drift_at(0.0, x).shape == (3, 4, 2)
        assert spec.potential_at(0.0, x).shape == (3, 4)
        assert spec.source_at(0.0, x).shape == (3, 4, 1)
        assert spec.initial_at(x).shape == (3, 4, 1)


# ---------------------------------------------------------------------------
# Tabulated fields
# ---------------------------------------------------------------------------

class TestTabulatedField:
    def _field(self) -> TabulatedField:
        lattice = Lattice((4,))
        values = np.stack([np.zeros((4, 1)), np.ones((4, 1))])
        return TabulatedField(np.array([0.0, 1.0]), lattice, values)

    def test_linear_in_time(self):
        field = self._field()
        x = np.array([[0.1], [0.6]])
        assert field(0.5, x)[:, 0] == pytest.approx([0.5, 0.5])
        assert field(0.25, x)[:, 0] == pytest.approx([0.25, 0.25])

    def test_constant_outside_knots(self):
        field = self._field()
        x = np.array([[0.1]])
        assert field(-1.0, x)[0, 0] == 0.0
        assert field(2.0, x)[0, 0] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ProblemError):
            TabulatedField(np.array([0.0]), Lattice((4,)), np.zeros((1, 5, 1)))


# ---------------------------------------------------------------------------
# Norms and constants
# ---------------------------------------------------------------------------

class TestNorms:
    def test_constant_field_on_torus(self):
        lattice = Lattice((8,))
        grid = TimeGrid(1.0, 10)
        field = np.full((grid.n_slices, lattice.n_nodes), 2.0)
        assert tilde_Lpq_norm(field, grid, lattice, PAIR) == pytest.approx(2.0)

    def test_time_window(self):
        lattice = Lattice((8,))
        grid = TimeGrid(1.0, 10)
        field = np.full((grid.n_slices, lattice.n_nodes), 2.0)
        norm = tilde_Lpq_norm(field, grid, lattice, PAIR, window=(0.0, 0.5))
        assert norm == pytest.approx(2.0 * 0.5 ** (1 / 8))

    def test_periodic_extension_dominates_torus(self):
        lattice = Lattice((8,))
        grid = TimeGrid(1.0, 10)
        field = np.random.default_rng(1).uniform(size=(grid.n_slices, lattice.n_nodes))
        torus = tilde_Lpq_norm(field, grid, lattice, PAIR)
        extension = tilde_Lpq_norm(field, grid, lattice, PAIR, domain="periodic-extension")
        assert extension >= torus

    def test_window_outside_grid(self):
        lattice = Lattice((8,))
        grid = TimeGrid(1.0, 10)
        with pytest.raises(ProblemError):
            tilde_Lpq_norm(np.ones((11, 8)), grid, lattice, PAIR, window=(0.5, 2.0))

    def test_cb1_norm_of_constant(self):
        lattice = Lattice((8,))
        assert cb1_norm(np.full((8, 1), -3.0), lattice) == 3.0

    def test_cb1_norm_of_sine(self):
        lattice = Lattice((64,))
        values = np.sin(2 * math.pi * lattice.coords[:, :1])
        assert cb1_norm(values, lattice) == pytest.approx(1 + 2 * math.pi, rel=1e-2)

    def test_k_constant_with_constant_potential(self):
        spec = build_problem("constant-potential")
        lattice = Lattice((64,))
        grid = TimeGrid(spec.horizon, 20)
        assert k_constant(spec, lattice, grid) == pytest.approx(math.exp(0.1), rel=1e-12)

    def test_k_constant_non_finite(self):
        spec = build_problem("heat")
        spec = spec.replace(potential=lambda t, x: np.full(x.shape[:-1], np.inf))
        assert k_constant(spec, Lattice((8,)), TimeGrid(spec.horizon, 4)) == math.inf

    @pytest.mark.parametrize("c", [-3.0, 0.25, 7.0])
    def test_norm_is_homogeneous(self, c):
        lattice = Lattice((8,))
        grid = TimeGrid(1.0, 10)
        field = np.random.default_rng(2).normal(size=(grid.n_slices, lattice.n_nodes))
        for domain in ("torus", "periodic-extension"):
            base = tilde_Lpq_norm(field, grid, lattice, PAIR, domain=domain)
            assert tilde_Lpq_norm(c * field, grid, lattice, PAIR, domain=domain) == pytest.approx(abs(c) * base)

    def test_norm_is_monotone(self):
        lattice = Lattice((8,))
        grid = TimeGrid(1.0, 10)
        rng = np.random.default_rng(3)
        small = rng.uniform(size=(grid.n_slices, lattice.n_nodes))
        large = small + rng.uniform(size=small.shape)
        for domain in ("torus", "periodic-extension"):
            assert tilde_Lpq_norm(small, grid, lattice, PAIR, domain=domain) <= tilde_Lpq_norm(
                large, grid, lattice, PAIR, domain=domain,
            )
        assert tilde_Lpq_norm(small, grid, lattice, PAIR, window=(0.0, 0.5)) <= tilde_Lpq_norm(small, grid, lattice, PAIR)

    def test_k_constant_is_homogeneous_in_data(self):
        lattice = Lattice((8,))
        spec = build_problem("nonlinear")
        grid = TimeGrid(spec.horizon, 10)
        doubled = build_problem("nonlinear", {"amplitude": 2.0, "source": 0.6})
        assert k_constant(doubled, lattice, grid) == pytest.approx(2.0 * k_constant(spec, lattice, grid))

    def test_k_constant_grows_with_data(self):
        lattice = Lattice((8,))
        grid = TimeGrid(0.25, 10)
        values = [
            k_constant(build_problem("nonlinear", {"potential": v, "source": g}), lattice, grid)
            for v, g in [(0.0, 0.0), (0.2, 0.0), (0.2, 0.3), (0.5, 0.3)]
        ]
        assert values == sorted(values)
        assert values[0] == pytest.approx(1.0)
        assert values[-1] == pytest.approx(math.exp(0.5 * 0.25) * (1.0 + 0.3 * 0.25))

    def test_ellipticity_bounds(self):
        spec = build_problem("heat", dim=2)
        assert ellipticity_bounds(spec, Lattice((4, 4)), TimeGrid(spec.horizon, 2)) == pytest.approx((0.5, 0.5, 0.0))

    def test_fbar_field_sup(self):
        spec = build_problem("nonlinear")
        lattice = Lattice((8,))
        grid = TimeGrid(spec.horizon, 4)
        fbar = fbar_field(spec, 10.0, lattice, grid)
        assert fbar.shape == (5, 8)
        assert 0.45 < fbar.max() <= 0.5

    def test_fbar_needs_finite_bound(self):
        spec = build_problem("heat")
        with pytest.raises(ProblemError):
            fbar_field(spec, math.inf, Lattice((8,)), TimeGrid(0.1, 2))


# ---------------------------------------------------------------------------
# Hypothesis probes
# ---------------------------------------------------------------------------

class TestProbes:
    def _probe(self, spec, **kwargs):
        lattice = Lattice.uniform(spec.dim_d, 8)
        grid = TimeGrid(spec.horizon, 10)
        return probe_assumptions(spec, PAIR, 100, lattice, grid, **kwargs)

    def test_heat_passes_everything(self):
        report = self._probe(build_problem("heat"))
        assert report.failing == []
        assert report.lambda_min == pytest.approx(0.5)
        assert report.alpha_probe == 0.0
        assert report.log_growth_probe == 0.0

    def test_outer_alpha_slope(self):
        report = self._probe(build_problem("outer"))
        assert report.alpha_probe == pytest.approx(0.05, rel=1e-6)
        assert report.pass_flags["H_F_g"]

    def test_outer_alpha_above_threshold(self):
        report = self._probe(build_problem("outer", {"alpha": 0.5}))
        assert not report.pass_flags["H_F_g"]
        assert "H_F_g" in report.failing

    def test_quadratic_source_fails_log_growth(self):
        spec = build_problem("heat").replace(source=lambda t, x, r1, r2, r3: r1**2)
        report = self._probe(spec)
        assert report.log_growth_probe > 0.45
        assert not report.pass_flags["H'_F_g"]

    def test_non_finite_nonlinearity_is_reported(self):
        spec = build_problem("heat").replace(
            nonlinearity=lambda t, x, r1, r2: np.full(x.shape, np.inf),
        )
        report = self._probe(spec)
        assert not report.pass_flags["H0_F_g"]
        assert report.failure is not None
        assert report.failure.startswith("non-finite nonlinearity")

    def test_rows_are_stable(self):
        rows = dict(self._probe(build_problem("heat")).rows())
        assert rows["pass[kato_pair]"] == "true"
        assert rows["failure"] == ""

    def test_budget_floor(self):
        spec = build_problem("heat")
        with pytest.raises(ProblemError):
            probe_assumptions(spec, PAIR, 50, Lattice((8,)), TimeGrid(0.1, 2))
