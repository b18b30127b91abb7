"""Named problems and CSV-tabulated coefficients.

Every catalog entry declares its parameters with defaults; a parameter the
entry does not declare is a ConfigError, not a silent no-op.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable
from pathlib import Path

import numpy as np

from future_sde_solver.models.errors import ConfigError
from future_sde_solver.models.lattice import Lattice
from future_sde_solver.models.problem import ProblemSpec, TabulatedField
from future_sde_solver.models.transforms import KpzProblem

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

# ---------------------------------------------------------------------------
# Coefficient building blocks
# ---------------------------------------------------------------------------


def _isotropic(diffusion: float, d: int):
    a = diffusion * np.eye(d)

    def fn(t, x):
        return a

    return fn


def _zero_drift(d: int):
    zero = np.zeros(d)

    def fn(t, x):
        return zero

    return fn


def _zero_potential(t, x):
    return np.zeros(x.shape[:-1])


def _zero_nonlinearity(d: int):
    zero = np.zeros(d)

    def fn(t, x, r1, r2):
        return zero

    return fn


def _zero_source(m: int):
    zero = np.zeros(m)

    def fn(t, x, r1, r2, r3):
        return zero

    return fn


def _sine_mode(amplitude: float, m: int = 1):
    def fn(x):
        wave = amplitude * np.sin(TWO_PI * x[..., :1])
        return np.repeat(wave, m, axis=-1) if m > 1 else wave

    return fn


def _cosine_potential(level: float):
    def fn(t, x):
        return level * np.cos(TWO_PI * x[..., 0])

    return fn


def _cosine_source(level: float, m: int = 1):
    def fn(t, x, r1, r2, r3):
        wave = level * np.cos(TWO_PI * x[..., :1])
        return np.repeat(wave, m, axis=-1) if m > 1 else wave

    return fn


def _unit(d: int) -> np.ndarray:
    e = np.zeros(d)
    e[0] = 1.0
    return e


def _background(name: str, dim: int, p: dict[str, float], m: int = 1, **fields) -> ProblemSpec:
    spec = dict(
        name=name,
        dim_d=dim,
        dim_m=m,
        horizon=p["horizon"],
        diffusion=_isotropic(p["diffusion"], dim),
        drift=_zero_drift(dim),
        potential=_zero_potential,
        nonlinearity=_zero_nonlinearity(dim),
        source=_zero_source(m),
        initial=_sine_mode(p.get("amplitude", 1.0), m),
    )
    spec.update(fields)
    return ProblemSpec(**spec)


# ---------------------------------------------------------------------------
# Catalog entries
# ---------------------------------------------------------------------------

def _heat(dim: int, p: dict[str, float]) -> ProblemSpec:
    return _background("heat", dim, p)


def _constant_potential(dim: int, p: dict[str, float]) -> ProblemSpec:
    level = p["potential"]

    def potential(t, x):
        return np.full(x.shape[:-1], level)

    return _background("constant-potential", dim, p, potential=potential)


def _nonlinear(dim: int, p: dict[str, float]) -> ProblemSpec:
    e = _unit(dim)
    strength = p["strength"]

    def nonlinearity(t, x, r1, r2):
        return strength * np.sin(r1[..., :1]) * e

    return _background(
        "nonlinear", dim, p,
        potential=_cosine_potential(p["potential"]),
        nonlinearity=nonlinearity,
        source=_cosine_source(p["source"]),
    )


def _outer(dim: int, p: dict[str, float]) -> ProblemSpec:
    alpha = p["alpha"]
    g0 = _cosine_source(p["source"])

    def source(t, x, r1, r2, r3):
        laplacian = np.trace(r3, axis1=-3, axis2=-2)
        return g0(t, x, r1, r2, r3) + alpha * laplacian

    return _background("outer", dim, p, source=source, spatial_source=False)


def _factored(dim: int, p: dict[str, float]) -> ProblemSpec:
    e = _unit(dim)
    strength = p["strength"]

    def nonlinearity(t, x, r1, r2):
        profile = strength * np.cos(TWO_PI * x[..., :1])
        return profile * np.tanh(r1[..., :1]) * e

    return _background(
        "factored-F", dim, p,
        nonlinearity=nonlinearity,
        source=_cosine_source(p["source"]),
    )


def _blowup(dim: int, p: dict[str, float]) -> ProblemSpec:
    e = _unit(dim)
    strength = p["strength"]

    def nonlinearity(t, x, r1, r2):
        return strength * r1[..., :1] * e

    return _background("blowup", dim, p, nonlinearity=nonlinearity)


def _kpz(dim: int, p: dict[str, float]) -> KpzProblem:
    e = _unit(dim)
    strength = p["transport"]

    def transport(t, x, r1):
        return strength * np.sin(r1[..., :1]) * e

    base = _background("kpz", dim, p)
    return KpzProblem(base, p["beta"], _cosine_potential(p["potential"]), transport)


def _navier_stokes(dim: int, p: dict[str, float]) -> KpzProblem:
    coupling = p["coupling"]

    def transport(t, x, r1):
        return -coupling * r1

    def initial(x):
        return p["amplitude"] * np.sin(TWO_PI * x)

    base = _background("navier-stokes", dim, p, m=dim, initial=initial)
    return KpzProblem(base, 0.0, _cosine_potential(p["forcing"]), transport)


_COMMON = {"horizon": 0.1, "diffusion": 0.5}

PROBLEMS: dict[str, tuple[dict[str, float], Callable[[int, dict[str, float]], ProblemSpec | KpzProblem]]] = {
    "heat": ({**_COMMON, "amplitude": 1.0}, _heat),
    "constant-potential": ({**_COMMON, "amplitude": 1.0, "potential": 1.0}, _constant_potential),
    "nonlinear": (
        {**_COMMON, "horizon": 0.25, "amplitude": 1.0, "strength": 0.5, "potential": 0.2, "source": 0.3},
        _nonlinear,
    ),
    "outer": ({**_COMMON, "amplitude": 1.0, "alpha": 0.05, "source": 0.3}, _outer),
    "factored-F": ({**_COMMON, "horizon": 0.25, "amplitude": 1.0, "strength": 0.5, "source": 0.3}, _factored),
    "blowup": ({**_COMMON, "amplitude": 1.0, "strength": 5.0}, _blowup),
    "kpz": (
        {**_COMMON, "horizon": 0.2, "amplitude": 0.1, "beta": 1.0, "potential": 0.2, "transport": 0.0},
        _kpz,
    ),
    "navier-stokes": ({**_COMMON, "amplitude": 0.1, "coupling": 1.0, "forcing": 0.0}, _navier_stokes),
}

TABULATED_DEFAULTS = {"diffusion": 0.5}


def _merge(name: str, defaults: dict[str, float], params: dict[str, float]) -> dict[str, float]:
    unknown = sorted(set(params) - set(defaults))
    if unknown:
        raise ConfigError(f"problem {name!r} has no parameter(s) {', '.join(unknown)}")
    return {**defaults, **params}


def build_problem(
    name: str,
    params: dict[str, float] | None = None,
    dim: int = 1,
    tabulated: Path | None = None,
) -> ProblemSpec | KpzProblem:
    """Look up ``name`` and build it with ``params`` over the catalog defaults."""
    params = params or {}
    if name == "tabulated":
        if tabulated is None:
            raise ConfigError("problem 'tabulated' needs a tabulated = <csv path> setting")
        return load_tabulated(tabulated, params)
    if name not in PROBLEMS:
        raise ConfigError(f"unknown problem {name!r}; choose from {', '.join(sorted(PROBLEMS) + ['tabulated'])}")
    defaults, builder = PROBLEMS[name]
    return builder(dim, _merge(name, defaults, params))


# ---------------------------------------------------------------------------
# Tabulated coefficients
# ---------------------------------------------------------------------------


def _coordinate_columns(header: list[str]) -> list[str]:
    if "x" in header:
        return ["x"]
    cols = []
    while f"x{len(cols) + 1}" in header:
        cols.append(f"x{len(cols) + 1}")
    if not cols:
        raise ConfigError("tabulated CSV needs an x or x1..xd column")
    return cols


def _axis_index(values: np.ndarray) -> tuple[np.ndarray, int]:
    knots = np.unique(values)
    n = len(knots)
    index = np.rint(np.mod(values, 1.0) * n).astype(int) % n
    if not np.allclose(np.sort(np.mod(knots, 1.0)), np.arange(n) / n, atol=1e-9):
        raise ConfigError(f"tabulated coordinates are not a uniform lattice of {n} nodes")
    return index, n


def load_tabulated(path: Path, params: dict[str, float] | None = None) -> ProblemSpec:
    """Read V, g, u0 and b tabulated on (t, x) rows into a ProblemSpec.

    Missing columns default to zero (u0 included). ``u0`` is read from the
    rows at the earliest time.
    """
    p = _merge("tabulated", {**TABULATED_DEFAULTS, "horizon": 0.0}, params or {})
    try:
        with open(path, encoding="utf-8", newline="") as handle:
            reader = csv.DictReader(handle)
            header = list(reader.fieldnames or [])
            rows = list(reader)
    except OSError as exc:
        raise ConfigError(f"cannot read tabulated coefficients {path}: {exc}") from exc
    if "t" not in header or not rows:
        raise ConfigError(f"{path}: tabulated CSV needs a t column and at least one row")
    coord_cols = _coordinate_columns(header)
    dim = len(coord_cols)

    def column(name: str) -> np.ndarray:
        try:
            return np.array([float(row[name]) for row in rows])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: bad value in column {name}: {exc}") from exc

    t = column("t")
    times = np.unique(t)
    t_index = np.searchsorted(times, t)
    axes = [_axis_index(column(c)) for c in coord_cols]
    lattice = Lattice(tuple(n for _, n in axes))
    node = np.ravel_multi_index(tuple(idx for idx, _ in axes), lattice.shape)
    seen = np.zeros((len(times), lattice.n_nodes), dtype=bool)
    seen[t_index, node] = True
    if not seen.all():
        raise ConfigError(f"{path}: rows do not cover every (t, node) pair")

    def field(name: str, width: int) -> TabulatedField | None:
        names = [name] if width == 1 else [f"{name}{i + 1}" for i in range(width)]
        if not all(n in header for n in names):
            return None
        values = np.zeros((len(times), lattice.n_nodes, width))
        for j, n in enumerate(names):
            values[t_index, node, j] = column(n)
        return TabulatedField(times, lattice, values)

    horizon = p["horizon"] or float(times[-1])
    fields: dict[str, object] = {}
    if (v := field("V", 1)) is not None:
        fields["potential"] = v.scalar
    if (g := field("g", 1)) is not None:
        fields["source"] = lambda s, x, r1, r2, r3, g=g: g(s, x)
    if (b := field("b", dim)) is not None:
        fields["drift"] = b
    if (u0 := field("u0", 1)) is not None:
        first = TabulatedField(times[:1], lattice, u0.values[:1])
        fields["initial"] = lambda x, first=first: first(0.0, x)
    else:
        fields["initial"] = lambda x: np.zeros(x.shape[:-1] + (1,))
    logger.info("loaded %d time knot(s) x %d node(s) from %s", len(times), lattice.n_nodes, path)
    return _background("tabulated", dim, {**p, "horizon": horizon}, **fields)
