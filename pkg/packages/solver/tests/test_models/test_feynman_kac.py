"""Tests for the Feynman-Kac estimators and Bismut gradients."""

from __future__ import annotations

import math

import numpy as np
import pytest

from future_sde_solver.models.catalog import build_problem
from future_sde_solver.models.config import SolverConfig
from future_sde_solver.models.errors import BlowUpError, FieldMismatchError, ProblemError
from future_sde_solver.models.feynman_kac import (
    PsiField,
    bismut_gradient,
    estimate_psi_field,
    estimate_psi_slice,
    gradient_bound_constants,
    gradient_of_field,
    semigroup_apply,
    semigroup_cb1_ratio,
    u_v_functional,
    weighted_mass,
)
from future_sde_solver.models.fd_oracle import fd_solve
from future_sde_solver.models.lattice import Lattice, TimeGrid, interpolate, periodic_gradient
from future_sde_solver.models.rng import RngStream
from future_sde_solver.models.sde_engine import simulate_ensemble

LATTICE = Lattice((8,))
TWO_PI = 2 * math.pi


def _config(**kwargs) -> SolverConfig:
    defaults = dict(particles=2000, n_steps=20, nodes=8, probe_budget=100)
    defaults.update(kwargs)
    return SolverConfig(**defaults)


def _sine(x: np.ndarray) -> np.ndarray:
    return np.sin(TWO_PI * x[..., :1])


def _heat_mode(t: float) -> np.ndarray:
    """sin(2 pi x) decayed over t under a = 1/2."""
    return math.exp(-2 * math.pi**2 * t) * _sine(LATTICE.coords)


# ---------------------------------------------------------------------------
# psi estimation
# ---------------------------------------------------------------------------

class TestEstimatePsi:
    def test_heat_mode(self):
        spec = build_problem("heat")
        values, stderr = estimate_psi_slice(spec, None, 0, LATTICE, _config(), RngStream(1))
        expected = _heat_mode(spec.horizon)
        assert values.shape == (8, 1)
        assert np.all(np.abs(values - expected) <= 5 * stderr + 1e-3)

    def test_terminal_slice_is_initial_datum(self):
        spec = build_problem("heat")
        config = _config()
        values, stderr = estimate_psi_slice(spec, None, config.n_steps, LATTICE, config, RngStream(1))
        assert np.array_equal(values, _sine(LATTICE.coords))
        assert not stderr.any()

    def test_constant_potential_scales(self):
        spec = build_problem("constant-potential")
        values, stderr = estimate_psi_slice(spec, None, 0, LATTICE, _config(), RngStream(2))
        expected = math.exp(spec.horizon) * _heat_mode(spec.horizon)
        assert np.all(np.abs(values - expected) <= 5 * stderr + 2e-3)

    def test_unit_source_integrates_time(self):
        spec = build_problem("heat", {"amplitude": 0.0}).replace(
            source=lambda t, x, r1, r2, r3: np.ones(x.shape[:-1] + (1,)),
        )
        config = _config(particles=50)
        field = estimate_psi_field(spec, None, LATTICE, config.time_grid(spec.horizon), config, RngStream(1))
        remaining = spec.horizon - config.time_grid(spec.horizon).slice_times
        assert field.values[:, :, 0] == pytest.approx(np.repeat(remaining[:, None], 8, axis=1), abs=1e-12)
        assert field.stderr == pytest.approx(np.zeros_like(field.stderr), abs=1e-12)

    def test_non_spatial_source_rejected(self):
        spec = build_problem("outer")
        with pytest.raises(ProblemError):
            estimate_psi_slice(spec, None, 0, LATTICE, _config(), RngStream(1))

    def test_slice_out_of_range(self):
        spec = build_problem("heat")
        with pytest.raises(ProblemError):
            estimate_psi_slice(spec, None, 21, LATTICE, _config(), RngStream(1))

    def test_chunking_and_workers_do_not_change_numbers(self):
        spec = build_problem("heat")
        plain, _ = estimate_psi_slice(spec, None, 5, LATTICE, _config(particles=200), RngStream(5))
        chunked, _ = estimate_psi_slice(
            spec, None, 5, LATTICE, _config(particles=200, chunk_bytes=300_000, workers=3), RngStream(5),
        )
        assert np.array_equal(plain, chunked)

    def test_field_has_grid_difference_gradients(self):
        spec = build_problem("heat")
        config = _config(particles=100, n_steps=4)
        field = estimate_psi_field(spec, None, LATTICE, config.time_grid(spec.horizon), config, RngStream(1))
        assert field.provenance == "grid-difference"
        assert field.gradients.shape == (5, 8, 1, 1)


# ---------------------------------------------------------------------------
# Semigroup and u^V
# ---------------------------------------------------------------------------

class TestSemigroup:
    def test_heat_semigroup(self):
        spec = build_problem("heat")
        config = _config()
        values, stderr = semigroup_apply(spec, None, 0, 10, _sine, config, RngStream(3), LATTICE)
        expected = _heat_mode(0.05)
        assert np.all(np.abs(values - expected) <= 5 * stderr + 1e-3)

    def test_equal_times_is_identity(self):
        spec = build_problem("heat")
        values, stderr = semigroup_apply(spec, None, 4, 4, _sine, _config(), RngStream(3), LATTICE)
        assert np.array_equal(values, _sine(LATTICE.coords))
        assert not stderr.any()

    def test_reversed_times(self):
        spec = build_problem("heat")
        with pytest.raises(ProblemError):
            semigroup_apply(spec, None, 5, 4, _sine, _config(), RngStream(3), LATTICE)

    def test_u_v_of_constant_with_constant_potential(self):
        c = 1.0
        spec = build_problem("constant-potential", {"potential": c})
        config = _config(particles=10)
        dt = spec.horizon / config.n_steps
        n = config.n_steps
        expected = dt * math.expm1(c * n * dt) / math.expm1(c * dt)

        def unit(k, x):
            return np.ones(x.shape[:-1] + (1,))

        values, stderr = u_v_functional(spec, None, 0, unit, config, RngStream(1), LATTICE)
        assert values == pytest.approx(np.full((8, 1), expected), rel=1e-10)
        assert stderr == pytest.approx(np.zeros((8, 1)), abs=1e-12)

        table = np.ones((n + 1, 8, 1))
        from_table, _ = u_v_functional(spec, None, 0, table, config, RngStream(1), LATTICE)
        assert from_table == pytest.approx(values, rel=1e-12)

    def test_u_v_table_shape_checked(self):
        spec = build_problem("heat")
        with pytest.raises(FieldMismatchError):
            u_v_functional(spec, None, 0, np.ones((3, 8, 1)), _config(), RngStream(1), LATTICE)

    def test_cb1_ratio_contracts_for_heat(self):
        spec = build_problem("heat")
        ratio = semigroup_cb1_ratio(spec, None, 0, 10, _sine, _config(), RngStream(3), LATTICE)
        assert 0.0 < ratio < 1.2


# ---------------------------------------------------------------------------
# Bismut gradients
# ---------------------------------------------------------------------------

class TestBismut:
    def _ensemble(self, particles: int = 4000):
        spec = build_problem("heat")
        grid = TimeGrid(spec.horizon, 20)
        return simulate_ensemble(
            spec, None, (10, LATTICE.coords), grid, particles, RngStream(8), want_derivatives=True,
        )

    def test_gradient_of_heat_mode(self):
        ens = self._ensemble()
        estimate, stderr = bismut_gradient(ens, _sine, np.array([1.0]))
        expected = TWO_PI * math.exp(-2 * math.pi**2 * 0.05) * np.cos(TWO_PI * LATTICE.coords[:, :1])
        assert np.all(np.abs(estimate - expected) <= 5 * stderr + 1e-2)

    def test_gradient_of_constant_is_zero(self):
        ens = self._ensemble()
        estimate, stderr = bismut_gradient(ens, lambda x: np.ones(x.shape[:-1] + (1,)), np.array([1.0]))
        assert np.all(np.abs(estimate) <= 5 * stderr)

    def test_needs_derivative_data(self):
        spec = build_problem("heat")
        ens = simulate_ensemble(spec, None, (0, LATTICE.coords), TimeGrid(0.1, 4), 5, RngStream(1))
        with pytest.raises(ProblemError):
            bismut_gradient(ens, _sine, np.array([1.0]))

    def test_weighted_mass_without_potential(self):
        assert np.array_equal(weighted_mass(self._ensemble(10)), np.ones(8))

    def test_gradient_bound_constants(self):
        ens = self._ensemble(500)

        def grad_sine(x):
            return (TWO_PI * np.cos(TWO_PI * x[..., :1]))[..., None]

        bounds = gradient_bound_constants(ens, _sine, grad_sine)
        assert math.isfinite(bounds.k_moment) and bounds.k_moment > 0
        assert math.isfinite(bounds.k_gradient) and bounds.k_gradient > 0
        assert bounds.gradient_sup > 0


# ---------------------------------------------------------------------------
# PsiField
# ---------------------------------------------------------------------------

class TestPsiField:
    def _field(self, values: np.ndarray) -> PsiField:
        return PsiField(TimeGrid(0.1, 2), LATTICE, values, np.zeros_like(values))

    def test_shape_mismatch(self):
        with pytest.raises(FieldMismatchError):
            self._field(np.zeros((2, 8, 1)))

    def test_non_finite_value(self):
        values = np.zeros((3, 8, 1))
        values[1, 4, 0] = np.nan
        with pytest.raises(BlowUpError) as exc_info:
            self._field(values)
        assert exc_info.value.location == 4
        assert exc_info.value.time == pytest.approx(0.05)

    def test_bismut_needs_context(self):
        field = self._field(np.zeros((3, 8, 1)))
        with pytest.raises(ProblemError):
            gradient_of_field(field, "bismut")

    def test_unknown_gradient_mode(self):
        with pytest.raises(ProblemError):
            gradient_of_field(self._field(np.zeros((3, 8, 1))), "spectral")


# ---------------------------------------------------------------------------
# Gradient modes on whole fields
# ---------------------------------------------------------------------------

class TestFieldGradients:
    def test_bismut_gradient_of_running_source(self):
        # u0 = 0, g = cos(2 pi x): grad psi_0 = -2 pi sin(2 pi x) dt sum_k e^{-2 pi^2 k dt}
        spec = build_problem("heat", {"amplitude": 0.0}).replace(
            source=lambda t, x, r1, r2, r3: np.cos(TWO_PI * x[..., :1]),
        )
        config = _config(particles=4000)
        grid = config.time_grid(spec.horizon)
        field = estimate_psi_field(spec, None, LATTICE, grid, config, RngStream(12), gradient_mode="bismut")
        dt = grid.step_size
        factor = dt * sum(math.exp(-2 * math.pi**2 * k * dt) for k in range(grid.n_steps))
        expected = -TWO_PI * np.sin(TWO_PI * LATTICE.coords[:, :1]) * factor
        assert field.provenance == "bismut"
        assert field.gradients[0, :, 0, :] == pytest.approx(expected, abs=0.04)

    def test_bismut_gradient_with_potential(self):
        # u0 = 1 and V = 3 cos(2 pi x): the whole gradient comes from V
        spec = build_problem("heat").replace(
            initial=lambda x: np.ones(x.shape[:-1] + (1,)),
            potential=lambda t, x: 3.0 * np.cos(TWO_PI * x[..., 0]),
        )
        config = _config(particles=4000)
        grid = config.time_grid(spec.horizon)
        field = estimate_psi_field(spec, None, LATTICE, grid, config, RngStream(13), gradient_mode="bismut")
        fine = Lattice((64,))
        oracle = fd_solve(spec, fine, TimeGrid(spec.horizon, 200))
        expected = periodic_gradient(oracle.values[-1], fine)[::8]
        assert np.abs(expected).max() > 0.5
        assert field.gradients[0] == pytest.approx(expected, abs=0.25)

    def test_modes_agree_on_heat_data(self):
        spec = build_problem("heat")
        lattice = Lattice((16,))
        grid = TimeGrid(spec.horizon, 20)
        bismut = estimate_psi_field(
            spec, None, lattice, grid, _config(particles=8000, nodes=16), RngStream(14), gradient_mode="bismut",
        )
        differenced = estimate_psi_field(
            spec, None, lattice, grid, _config(particles=20000, nodes=16), RngStream(14),
            gradient_mode="grid-difference",
        )
        exact = TWO_PI * math.exp(-2 * math.pi**2 * spec.horizon) * np.cos(TWO_PI * lattice.coords[:, :1])
        a, b = bismut.gradients[0, :, 0, :], differenced.gradients[0, :, 0, :]
        assert a == pytest.approx(exact, abs=0.2)
        assert b == pytest.approx(exact, abs=0.2)
        assert np.abs(a - b).max() <= 0.3

    def test_path_samples_above_bound_are_counted(self):
        spec = build_problem("heat")
        config = _config(particles=200, n_steps=4)
        grid = config.time_grid(spec.horizon)
        within = estimate_psi_field(spec, None, LATTICE, grid, config, RngStream(1), path_bound=1.0)
        tight = estimate_psi_field(spec, None, LATTICE, grid, config, RngStream(1), path_bound=0.5)
        assert within.path_violations == 0
        assert tight.path_violations > 0
        assert np.array_equal(within.values, tight.values)


# ---------------------------------------------------------------------------
# Semigroup structure
# ---------------------------------------------------------------------------

class TestSemigroupStructure:
    def test_linear_under_common_random_numbers(self):
        spec = build_problem("constant-potential")
        config = _config(particles=500)
        base, _ = semigroup_apply(spec, None, 0, 10, _sine, config, RngStream(21), LATTICE)
        for c in (4.0, -0.5):
            scaled, _ = semigroup_apply(spec, None, 0, 10, lambda x, c=c: c * _sine(x), config, RngStream(21), LATTICE)
            assert np.array_equal(scaled, c * base)

        def cosine(x):
            return np.cos(TWO_PI * x[..., :1])

        other, _ = semigroup_apply(spec, None, 0, 10, cosine, config, RngStream(21), LATTICE)
        summed, _ = semigroup_apply(
            spec, None, 0, 10, lambda x: _sine(x) + cosine(x), config, RngStream(21), LATTICE,
        )
        assert summed == pytest.approx(base + other, rel=1e-12, abs=1e-12)

    def test_semigroup_property(self):
        spec = build_problem("constant-potential")
        lattice = Lattice((32,))
        config = _config(nodes=32)
        inner, inner_err = semigroup_apply(spec, None, 5, 10, _sine, config, RngStream(22), lattice)
        composed, composed_err = semigroup_apply(
            spec, None, 0, 5, lambda x: interpolate(inner, lattice, x), config, RngStream(23), lattice,
        )
        direct, direct_err = semigroup_apply(spec, None, 0, 10, _sine, config, RngStream(24), lattice)
        noise = 5 * (composed_err + direct_err + inner_err)
        assert np.all(np.abs(composed - direct) <= noise + 1e-2)


# ---------------------------------------------------------------------------
# Acceptance-scale checks
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_constant_gradient_noise_decays_at_root_n():
    spec = build_problem("heat")
    grid = TimeGrid(spec.horizon, 20)
    sizes = [100, 1_000, 10_000, 100_000]
    rms = []
    for n in sizes:
        estimates = []
        for seed in range(4):
            ens = simulate_ensemble(
                spec, None, (18, LATTICE.coords), grid, n, RngStream(100 + seed), want_derivatives=True,
            )
            estimate, _ = bismut_gradient(ens, lambda x: np.ones(x.shape[:-1] + (1,)), np.array([1.0]))
            estimates.append(estimate)
        rms.append(math.sqrt(float(np.mean(np.square(estimates)))))
    slope = np.polyfit(np.log(sizes), np.log(rms), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.1)


@pytest.mark.slow
def test_gradient_estimate_scales_with_root_time():
    spec = build_problem("heat")
    grid = TimeGrid(spec.horizon, 40)

    def step(x):
        return np.clip(8.0 * np.sin(TWO_PI * x[..., :1]), -1.0, 1.0)

    ens = simulate_ensemble(spec, None, (0, LATTICE.coords), grid, 5000, RngStream(31), want_derivatives=True)
    constants = []
    for s_index in (5, 10, 20, 40):
        estimate, _ = bismut_gradient(ens, step, np.array([1.0]), s_index)
        constants.append(float(np.abs(estimate).max()) * math.sqrt(grid.time(s_index)))
    assert max(constants) / min(constants) <= 3.0
