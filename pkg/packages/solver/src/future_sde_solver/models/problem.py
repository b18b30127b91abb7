"""Problem data, mixed norms, bound constants and hypothesis probes.

Coefficient maps are vectorised over any leading shape of ``x``:

    diffusion(t, x)               -> (..., d, d)
    drift(t, x)                   -> (..., d)
    potential(t, x)               -> (...)
    nonlinearity(t, x, r1, r2)    -> (..., d)      r1: (..., m), r2: (..., d, m)
    source(t, x, r1, r2, r3)      -> (..., m)      r3: (..., d, d, m)
    initial(x)                    -> (..., m)

Coordinates handed to a ProblemSpec accessor may be unwrapped; the accessors
reduce them to the unit torus before calling the coefficient maps.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from scipy.integrate import trapezoid
from scipy.stats import qmc

from future_sde_solver.models.errors import ProblemError
from future_sde_solver.models.lattice import Lattice, TimeGrid, interpolate, periodic_gradient

logger = logging.getLogger(__name__)

Diffusion = Callable[[float, np.ndarray], np.ndarray]
Drift = Callable[[float, np.ndarray], np.ndarray]
Potential = Callable[[float, np.ndarray], np.ndarray]
Nonlinearity = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
Source = Callable[[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
Initial = Callable[[np.ndarray], np.ndarray]

DOMAINS = ("torus", "periodic-extension")


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    dim_d: int
    dim_m: int
    horizon: float
    diffusion: Diffusion
    drift: Drift
    potential: Potential
    nonlinearity: Nonlinearity
    source: Source
    initial: Initial
    spatial_source: bool = True
    domain: str = "torus"
    cole_hopf_beta: float | None = None

    def __post_init__(self) -> None:
        if not 1 <= self.dim_d <= 3:
            raise ProblemError(f"dim_d must be 1-3, got {self.dim_d}")
        if self.dim_m < 1:
            raise ProblemError(f"dim_m must be >= 1, got {self.dim_m}")
        if not self.horizon > 0:
            raise ProblemError(f"horizon must be positive, got {self.horizon}")
        if self.domain not in DOMAINS:
            raise ProblemError(f"unknown domain {self.domain!r}")

    def replace(self, **changes) -> ProblemSpec:
        return dataclasses.replace(self, **changes)

    # Accessors: wrap, evaluate, broadcast to the documented shapes.

    def diffusion_at(self, t: float, x: np.ndarray) -> np.ndarray:
        d = self.dim_d
        return np.broadcast_to(self.diffusion(t, np.mod(x, 1.0)), x.shape[:-1] + (d, d))

    def drift_at(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.drift(t, np.mod(x, 1.0)), x.shape)

    def potential_at(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.potential(t, np.mod(x, 1.0)), x.shape[:-1])

    def nonlinearity_at(self, t: float, x: np.ndarray, r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.nonlinearity(t, np.mod(x, 1.0), r1, r2), x.shape)

    def source_at(
        self,
        t: float,
        x: np.ndarray,
        r1: np.ndarray | None = None,
        r2: np.ndarray | None = None,
        r3: np.ndarray | None = None,
    ) -> np.ndarray:
        lead = x.shape[:-1]
        d, m = self.dim_d, self.dim_m
        if r1 is None:
            r1 = np.zeros(lead + (m,))
        if r2 is None:
            r2 = np.zeros(lead + (d, m))
        if r3 is None:
            r3 = np.zeros(lead + (d, d, m))
        return np.broadcast_to(self.source(t, np.mod(x, 1.0), r1, r2, r3), lead + (m,))

    def initial_at(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.initial(np.mod(x, 1.0)), x.shape[:-1] + (self.dim_m,))


@dataclass(frozen=True)
class KatoPair:
    p: float
    q: float

    def admits(self, d: int) -> bool:
        return kato_class_check(d, self)


def kato_class_check(d: int, pair: KatoPair) -> bool:
    """True iff ``p, q > 2`` and ``d/p + 2/q < 1``."""
    if d < 1:
        raise ProblemError(f"dimension must be >= 1, got {d}")
    if not (pair.p > 2 and pair.q > 2):
        return False
    return d / pair.p + 2 / pair.q < 1


# ---------------------------------------------------------------------------
# Tabulated coefficients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TabulatedField:
    """A field tabulated on time knots x lattice nodes.

    Evaluation is linear in time between knots (constant outside) and
    periodic multilinear in space.
    """

    times: np.ndarray
    lattice: Lattice
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise ProblemError("tabulated values must have shape (n_times, n_nodes, k)")
        if self.values.shape[:2] != (len(self.times), self.lattice.n_nodes):
            raise ProblemError(
                f"tabulated values {self.values.shape[:2]} do not match "
                f"{len(self.times)} times x {self.lattice.n_nodes} nodes"
            )

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        if len(self.times) == 1 or t <= self.times[0]:
            return interpolate(self.values[0], self.lattice, x)
        if t >= self.times[-1]:
            return interpolate(self.values[-1], self.lattice, x)
        hi = int(np.searchsorted(self.times, t, side="right"))
        lo = hi - 1
        w = (t - self.times[lo]) / (self.times[hi] - self.times[lo])
        left = interpolate(self.values[lo], self.lattice, x)
        if w == 0.0:
            return left
        right = interpolate(self.values[hi], self.lattice, x)
        return (1.0 - w) * left + w * right

    def scalar(self, t: float, x: np.ndarray) -> np.ndarray:
        return self(t, x)[..., 0]


# ---------------------------------------------------------------------------
# Norms and constants
# ---------------------------------------------------------------------------

def _pointwise_magnitude(field: np.ndarray) -> np.ndarray:
    f = np.asarray(field, dtype=float)
    if f.ndim == 2:
        return np.abs(f)
    return np.linalg.norm(f.reshape(f.shape[0], f.shape[1], -1), axis=-1)


def _ball_multiplicity(lattice: Lattice) -> np.ndarray:
    """Number of integer translates of each lattice offset inside the unit ball."""
    offsets = lattice.to_grid(lattice.coords, 0)
    count = np.zeros(lattice.shape)
    shifts = np.arange(-2, 2)
    for k in np.stack(np.meshgrid(*([shifts] * lattice.dim), indexing="ij"), -1).reshape(-1, lattice.dim):
        count += np.linalg.norm(offsets + k, axis=-1) <= 1.0
    return count


def tilde_Lpq_norm(
    field: np.ndarray,
    grid: TimeGrid,
    lattice: Lattice,
    pair: KatoPair,
    window: tuple[float, float] | None = None,
    domain: str = "torus",
) -> float:
    """Localised mixed norm sup_z (int_t^s ||f_r 1_B(z,1)||_p^q dr)^(1/q).

    ``field`` has shape ``(n_slices, n_nodes)`` or ``(n_slices, n_nodes, k)``.
    On the torus the localisation is dropped; for the periodic extension the
    ball integral is a circular convolution with the translate count.
    """
    if lattice.n_nodes == 0 or field.size == 0:
        raise ProblemError("empty grid")
    start, stop = window if window is not None else (0.0, grid.horizon)
    eps = 1e-12 * grid.horizon
    if not (-eps <= start < stop <= grid.horizon + eps):
        raise ProblemError(f"window [{start}, {stop}] outside [0, {grid.horizon}]")
    times = grid.slice_times
    inside = (times >= start - eps) & (times <= stop + eps)
    if inside.sum() < 2:
        raise ProblemError(f"window [{start}, {stop}] holds fewer than two time knots")

    magnitude = _pointwise_magnitude(field)[inside]
    powered = magnitude**pair.p
    if domain == "torus":
        space = (powered.sum(axis=1) * lattice.cell_volume) ** (1.0 / pair.p)
        return float(trapezoid(space**pair.q, times[inside]) ** (1.0 / pair.q))

    kernel = _ball_multiplicity(lattice)
    grid_powered = lattice.to_grid(powered, 1)
    axes = tuple(range(1, 1 + lattice.dim))
    conv = scipy.fft.irfftn(
        scipy.fft.rfftn(grid_powered, axes=axes) * scipy.fft.rfftn(kernel),
        s=lattice.shape,
        axes=axes,
    )
    local = np.clip(lattice.from_grid(conv, 1), 0.0, None) * lattice.cell_volume
    per_center = trapezoid(local ** (pair.q / pair.p), times[inside], axis=0)
    return float(per_center.max() ** (1.0 / pair.q))


def cb1_norm(values: np.ndarray, lattice: Lattice) -> float:
    """||f||_inf + ||grad f||_inf with central differences."""
    lattice.require(3, "C1_b norm")
    v = np.asarray(values, dtype=float).reshape(lattice.n_nodes, -1)
    grad = periodic_gradient(v, lattice)
    sup = np.linalg.norm(v, axis=-1).max()
    lip = np.linalg.norm(grad.reshape(lattice.n_nodes, -1), axis=-1).max()
    return float(sup + lip)


def _slice_sup(values: np.ndarray) -> float:
    if not np.all(np.isfinite(values)):
        return math.inf
    return float(np.abs(values).max()) if values.size else 0.0


def k_constant(spec: ProblemSpec, lattice: Lattice, grid: TimeGrid) -> float:
    """e^{int ||V||} (||u0|| + int ||g||) probed on the lattice.

    For state-dependent sources the sup of |g(t, x, 0, 0, 0)| is used.
    """
    coords = lattice.coords
    times = grid.slice_times
    sup_v = np.empty(len(times))
    sup_g = np.empty(len(times))
    for j, t in enumerate(times):
        v = spec.potential_at(t, coords)
        g = np.linalg.norm(spec.source_at(t, coords), axis=-1)
        sup_v[j] = _slice_sup(v)
        sup_g[j] = _slice_sup(g)
        if not (math.isfinite(sup_v[j]) and math.isfinite(sup_g[j])):
            node = int(np.argmax(~np.isfinite(v) | ~np.isfinite(g)))
            logger.warning("non-finite coefficient at t=%s x=%s", t, coords[node])
            return math.inf
    u0 = np.linalg.norm(spec.initial_at(coords), axis=-1)
    if not np.all(np.isfinite(u0)):
        logger.warning("non-finite initial datum at x=%s", coords[int(np.argmax(~np.isfinite(u0)))])
        return math.inf
    value = math.exp(trapezoid(sup_v, times)) * (float(u0.max()) + trapezoid(sup_g, times))
    return float(value) if math.isfinite(value) else math.inf


def _r1_probe(m: int, radius: float, points: int) -> np.ndarray:
    if m == 1:
        return np.linspace(-radius, radius, 2 * points + 1)[:, None]
    halton = qmc.Halton(d=m, scramble=False).random(points * m)
    cube = (2.0 * halton - 1.0) * radius / math.sqrt(m)
    axes = np.concatenate([np.eye(m) * radius, -np.eye(m) * radius])
    return np.concatenate([np.zeros((1, m)), axes, cube])


def _box_probe(shape: tuple[int, ...], box: float, points: int) -> np.ndarray:
    size = int(np.prod(shape))
    if size == 1:
        return np.linspace(-box, box, 2 * points + 1).reshape((-1,) + shape)
    halton = qmc.Halton(d=size, scramble=False).random(points * size)
    samples = np.concatenate([np.zeros((1, size)), (2.0 * halton - 1.0) * box])
    return samples.reshape((-1,) + shape)


def fbar_field(
    spec: ProblemSpec,
    k: float,
    lattice: Lattice,
    grid: TimeGrid,
    *,
    box: float = 10.0,
    r1_points: int = 8,
    r2_points: int = 4,
) -> np.ndarray:
    """sup over |r1| <= k and r2 in the probe box of |F_t(x, r1, r2)|.

    Returns shape ``(n_slices, n_nodes)``; non-finite samples become +inf.
    """
    if not math.isfinite(k):
        raise ProblemError("fbar_field needs a finite bound k")
    d, m = spec.dim_d, spec.dim_m
    r1 = _r1_probe(m, k, r1_points)
    r2 = _box_probe((d, m), box, r2_points)
    combos_r1 = np.repeat(r1, len(r2), axis=0)
    combos_r2 = np.tile(r2, (len(r1), 1, 1))
    coords = lattice.coords
    n_probe = len(combos_r1)
    x = np.broadcast_to(coords, (n_probe,) + coords.shape)
    r1_b = np.broadcast_to(combos_r1[:, None, :], (n_probe, lattice.n_nodes, m))
    r2_b = np.broadcast_to(combos_r2[:, None, :, :], (n_probe, lattice.n_nodes, d, m))
    out = np.empty((grid.n_slices, lattice.n_nodes))
    for j, t in enumerate(grid.slice_times):
        values = np.linalg.norm(spec.nonlinearity_at(t, x, r1_b, r2_b), axis=-1)
        values = np.where(np.isfinite(values), values, np.inf)
        out[j] = values.max(axis=0)
    return out


def gbar_field(spec: ProblemSpec, lattice: Lattice, grid: TimeGrid) -> np.ndarray:
    """|g_t(x, 0, 0, 0)| on the lattice, shape ``(n_slices, n_nodes)``."""
    coords = lattice.coords
    return np.stack([
        np.linalg.norm(spec.source_at(t, coords), axis=-1) for t in grid.slice_times
    ])


def ellipticity_bounds(spec: ProblemSpec, lattice: Lattice, grid: TimeGrid) -> tuple[float, float, float]:
    """(smallest eigenvalue, largest eigenvalue, max asymmetry) of a on the lattice."""
    coords = lattice.coords
    lo, hi, asym = math.inf, -math.inf, 0.0
    for t in grid.slice_times:
        a = np.asarray(spec.diffusion_at(t, coords), dtype=float)
        if not np.all(np.isfinite(a)):
            return math.nan, math.nan, math.inf
        asym = max(asym, float(np.abs(a - np.swapaxes(a, -1, -2)).max()))
        eig = np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, -1, -2)))
        lo = min(lo, float(eig.min()))
        hi = max(hi, float(eig.max()))
    return lo, hi, asym


# ---------------------------------------------------------------------------
# Hypothesis probes
# ---------------------------------------------------------------------------

HEADROOM = 0.1
THETA_LIMIT = 0.5


@dataclass
class AssumptionReport:
    kato_norm_V: float = 0.0
    kato_norm_Fbar: float = 0.0
    kato_norm_gbar: float = 0.0
    kato_norm_b: float = 0.0
    k_constant: float = 0.0
    lipschitz_F_probe: float = 0.0
    lipschitz_g_probe: float = 0.0
    alpha_probe: float = 0.0
    log_growth_probe: float = 0.0
    lipschitz_b_probe: float = 0.0
    a_gradient_probe: float = 0.0
    lambda_min: float = 0.0
    lambda_max: float = 0.0
    u0_cb1: float = 0.0
    pass_flags: dict[str, bool] = field(default_factory=dict)
    failure: str | None = None

    def passes(self, *names: str) -> bool:
        return all(self.pass_flags.get(name, False) for name in names)

    @property
    def failing(self) -> list[str]:
        return sorted(name for name, ok in self.pass_flags.items() if not ok)

    def rows(self) -> list[tuple[str, str]]:
        """(name, value) rows in a stable order for tables and CSV output."""
        rows = [
            (f.name, format(getattr(self, f.name), ".6g"))
            for f in dataclasses.fields(self)
            if f.name not in ("pass_flags", "failure")
        ]
        rows += [(f"pass[{name}]", str(ok).lower()) for name, ok in sorted(self.pass_flags.items())]
        rows.append(("failure", self.failure or ""))
        return rows


class _Sampler:
    """Quasi-random (t, x, r1, r2, r3) samples mapped into the probe boxes."""

    def __init__(self, spec: ProblemSpec, budget: int, r1_radius: float, box: float) -> None:
        d, m = spec.dim_d, spec.dim_m
        self.sizes = (1, d, m, d * m, d * d * m)
        unit = qmc.Halton(d=sum(self.sizes), scramble=False).random(budget)
        cuts = np.cumsum((0,) + self.sizes)
        parts = [unit[:, cuts[i]:cuts[i + 1]] for i in range(5)]
        n = budget
        self.t = parts[0][:, 0] * spec.horizon
        self.x = parts[1]
        self.r1 = (2.0 * parts[2] - 1.0) * r1_radius / math.sqrt(m)
        self.r2 = ((2.0 * parts[3] - 1.0) * box).reshape(n, d, m)
        self.r3 = ((2.0 * parts[4] - 1.0) * box).reshape(n, d, d, m)


def _direction(shape: tuple[int, ...]) -> np.ndarray:
    size = int(np.prod(shape))
    return (np.ones(size) / math.sqrt(size)).reshape(shape)


class _FailureLog:
    def __init__(self) -> None:
        self.message: str | None = None

    def check(self, values: np.ndarray, label: str, t: np.ndarray, x: np.ndarray) -> bool:
        flat = np.asarray(values).reshape(len(t), -1)
        bad = ~np.all(np.isfinite(flat), axis=1)
        if bad.any():
            i = int(np.argmax(bad))
            if self.message is None:
                self.message = f"non-finite {label} at t={t[i]:.6g} x={np.round(x[i], 6).tolist()}"
                logger.warning(self.message)
            return False
        return True


def _slopes(evaluate: Callable[[int], np.ndarray], perturbed: Callable[[int], np.ndarray], step: float,
            n: int) -> np.ndarray:
    base = np.stack([evaluate(i) for i in range(n)])
    moved = np.stack([perturbed(i) for i in range(n)])
    diff = (moved - base).reshape(n, -1)
    return np.linalg.norm(diff, axis=-1) / step


def _log_growth(spec: ProblemSpec, sampler: _Sampler, failures: _FailureLog) -> float:
    """Exponent theta fitted to |g(r) - g(0)| ~ C (e + rho) log(e + rho)^theta."""
    d, m = spec.dim_d, spec.dim_m
    n = min(len(sampler.t), 64)
    t, x = sampler.t[:n], sampler.x[:n]
    dir1 = _direction((m,))
    dir2 = _direction((d, m))
    scales = np.geomspace(1e2, 1e8, 13)
    excess = np.empty(len(scales))
    for j, s in enumerate(scales):
        r1 = np.broadcast_to(dir1 * (s / 2), (n, m))
        r2 = np.broadcast_to(dir2 * (s / 2), (n, d, m))
        grown = np.stack([spec.source_at(t[i], x[i][None, :], r1[i][None], r2[i][None])[0] for i in range(n)])
        base = np.stack([spec.source_at(t[i], x[i][None, :])[0] for i in range(n)])
        if not failures.check(grown, "source growth", t, x):
            return math.inf
        excess[j] = np.linalg.norm(grown - base, axis=-1).max()
    if excess.max() <= 1e-300:
        return 0.0
    rho = math.e + scales
    keep = excess > 0
    if keep.sum() < 2:
        return 0.0
    slope, _ = np.polyfit(np.log(np.log(rho[keep])), np.log(excess[keep] / rho[keep]), 1)
    return float(slope)


def probe_assumptions(
    spec: ProblemSpec,
    pair: KatoPair,
    budget: int,
    lattice: Lattice,
    grid: TimeGrid,
    *,
    box: float = 10.0,
    alpha_threshold: float = 0.1,
) -> AssumptionReport:
    """Estimate the hypothesis constants on deterministic sample sets.

    Flags pass when the estimates satisfy the hypothesis inequalities with
    10% headroom; nothing here is a proof.
    """
    if budget < 100:
        raise ProblemError(f"probe budget must be >= 100, got {budget}")
    report = AssumptionReport()
    failures = _FailureLog()
    d, m = spec.dim_d, spec.dim_m
    coords = lattice.coords
    times = grid.slice_times

    # (H_{a,b})
    report.lambda_min, report.lambda_max, asym = ellipticity_bounds(spec, lattice, grid)
    b_field = np.stack([np.linalg.norm(spec.drift_at(t, coords), axis=-1) for t in times])
    report.kato_norm_b = tilde_Lpq_norm(b_field, grid, lattice, pair, domain=spec.domain)

    # (H_{V,u0})
    v_field = np.stack([spec.potential_at(t, coords) for t in times])
    report.kato_norm_V = tilde_Lpq_norm(v_field, grid, lattice, pair, domain=spec.domain)
    report.u0_cb1 = cb1_norm(spec.initial_at(coords), lattice)
    report.k_constant = k_constant(spec, lattice, grid)

    # F-bar and g-bar norms
    k_finite = math.isfinite(report.k_constant)
    if k_finite:
        fbar = fbar_field(spec, report.k_constant, lattice, grid, box=box)
        report.kato_norm_Fbar = tilde_Lpq_norm(fbar, grid, lattice, pair, domain=spec.domain)
    else:
        report.kato_norm_Fbar = math.inf
    report.kato_norm_gbar = tilde_Lpq_norm(gbar_field(spec, lattice, grid), grid, lattice, pair,
                                           domain=spec.domain)

    # Finite-difference slopes on quasi-random samples
    r1_radius = report.k_constant if k_finite and report.k_constant > 0 else box
    sampler = _Sampler(spec, budget, min(r1_radius, box), box)
    s = sampler
    step = 1e-3
    e_x = _direction((d,))
    e_r1 = _direction((m,))
    e_r2 = _direction((d, m))
    e_r3 = _direction((d, d, m))

    def one(i: int) -> np.ndarray:
        return s.x[i][None, :]

    def F(i: int, dr1: float = 0.0, dr2: float = 0.0) -> np.ndarray:
        return spec.nonlinearity_at(s.t[i], one(i), (s.r1[i] + dr1 * e_r1)[None], (s.r2[i] + dr2 * e_r2)[None])[0]

    def g(i: int, dr1: float = 0.0, dr2: float = 0.0, dr3: float = 0.0) -> np.ndarray:
        return spec.source_at(
            s.t[i], one(i), (s.r1[i] + dr1 * e_r1)[None], (s.r2[i] + dr2 * e_r2)[None],
            (s.r3[i] + dr3 * e_r3)[None],
        )[0]

    n = budget
    f_base = np.stack([F(i) for i in range(n)])
    g_base = np.stack([g(i) for i in range(n)])
    finite = failures.check(f_base, "nonlinearity", s.t, s.x) & failures.check(g_base, "source", s.t, s.x)
    if finite:
        report.lipschitz_F_probe = float(max(
            _slopes(F, lambda i: F(i, dr1=step), step, n).max(),
            _slopes(F, lambda i: F(i, dr2=step), step, n).max(),
        ))
        report.lipschitz_g_probe = float(max(
            _slopes(g, lambda i: g(i, dr1=step), step, n).max(),
            _slopes(g, lambda i: g(i, dr2=step), step, n).max(),
        ))
        report.alpha_probe = float(_slopes(g, lambda i: g(i, dr3=step), step, n).max())
        report.log_growth_probe = _log_growth(spec, s, failures)
    else:
        report.lipschitz_F_probe = report.lipschitz_g_probe = math.inf
        report.alpha_probe = report.log_growth_probe = math.inf

    b_base = np.stack([spec.drift_at(s.t[i], one(i))[0] for i in range(n)])
    b_moved = np.stack([spec.drift_at(s.t[i], one(i) + step * e_x)[0] for i in range(n)])
    a_base = np.stack([spec.diffusion_at(s.t[i], one(i))[0] for i in range(n)])
    a_moved = np.stack([spec.diffusion_at(s.t[i], one(i) + step * e_x)[0] for i in range(n)])
    if failures.check(b_base, "drift", s.t, s.x) and failures.check(a_base, "diffusion", s.t, s.x):
        report.lipschitz_b_probe = float((np.linalg.norm((b_moved - b_base).reshape(n, -1), axis=-1) / step).max())
        report.a_gradient_probe = float((np.linalg.norm((a_moved - a_base).reshape(n, -1), axis=-1) / step).max())
    else:
        report.lipschitz_b_probe = report.a_gradient_probe = math.inf

    def finite_all(*values: float) -> bool:
        return all(math.isfinite(v) for v in values)

    admitted = d / pair.p + 2 / pair.q <= 1 - HEADROOM and pair.p > 2 and pair.q > 2
    report.pass_flags = {
        "kato_pair": bool(admitted),
        "H_a_b": bool(
            report.lambda_min > 0
            and finite_all(report.lambda_max, report.kato_norm_b, report.lipschitz_b_probe, report.a_gradient_probe)
            and asym <= 1e-9 * max(1.0, abs(report.lambda_max))
        ),
        "H_V_u0": finite_all(report.kato_norm_V, report.u0_cb1, report.k_constant),
        "H0_F_g": finite_all(report.kato_norm_Fbar, report.kato_norm_gbar, report.lipschitz_F_probe,
                             report.lipschitz_g_probe),
        "H_F_g": bool(
            finite_all(report.kato_norm_Fbar, report.kato_norm_gbar, report.lipschitz_F_probe)
            and report.alpha_probe <= (1 - HEADROOM) * alpha_threshold
        ),
        "H'_F_g": bool(
            report.log_growth_probe < (1 - HEADROOM) * THETA_LIMIT
            and report.alpha_probe <= (1 - HEADROOM) * alpha_threshold
        ),
    }
    report.failure = failures.message
    for name in report.failing:
        logger.warning("assumption probe %s failed", name)
    return report
