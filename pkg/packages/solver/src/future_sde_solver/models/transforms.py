"""Cole-Hopf substitution for quadratic-gradient (KPZ type) equations.

The direct equation

    du/dt = L u - beta <a grad u, grad u> + F(t, x, phi_beta(u)) . grad u + V

becomes, under v = exp(-beta u), the linear-in-gradient problem

    dv/dt = (L - beta V) v + F(t, x, (1 - v) / beta) . grad v

which the Monte Carlo solver handles with g = 0.
"""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from future_sde_solver.models.errors import PositivityError, ProblemError
from future_sde_solver.models.fd_oracle import FdSolution
from future_sde_solver.models.feynman_kac import PsiField
from future_sde_solver.models.problem import Potential, ProblemSpec

logger = logging.getLogger(__name__)

Transport = Callable[[float, np.ndarray, np.ndarray], np.ndarray]

EXPONENT_CLAMP = 700.0


@dataclass(frozen=True)
class KpzProblem:
    """Background operator and data in ``base``; ``transport`` is F(t, x, r1)."""

    base: ProblemSpec
    beta: float
    potential: Potential
    transport: Transport

    def __post_init__(self) -> None:
        if not np.isfinite(self.beta):
            raise ProblemError(f"beta must be finite, got {self.beta}")

    def potential_bar(self, t: float, x: np.ndarray) -> np.ndarray:
        """V as the constant m-vector source."""
        v = np.asarray(self.potential(t, x), dtype=float)
        return np.broadcast_to(v[..., None], x.shape[:-1] + (self.base.dim_m,))


def phi_beta(u: np.ndarray, beta: float) -> np.ndarray:
    """(1 - exp(-beta u)) / beta componentwise; u itself when beta = 0."""
    u = np.asarray(u, dtype=float)
    if beta == 0.0:
        return u.copy()
    return -np.expm1(np.clip(-beta * u, -EXPONENT_CLAMP, EXPONENT_CLAMP)) / beta


def cole_hopf(u: np.ndarray, beta: float) -> np.ndarray:
    """v = exp(-beta u)."""
    return np.exp(np.clip(-beta * np.asarray(u, dtype=float), -EXPONENT_CLAMP, EXPONENT_CLAMP))


def _zero_potential(t: float, x: np.ndarray) -> np.ndarray:
    return np.zeros(x.shape[:-1])


def base_problem(kpz: KpzProblem) -> ProblemSpec:
    """The beta = 0 equation du/dt = L u + F(u) . grad u + V, used as it stands."""
    if kpz.beta != 0.0:
        raise ProblemError("base_problem is the beta = 0 branch; use build_transformed_problem")
    transport = kpz.transport

    def nonlinearity(t, x, r1, r2):
        return transport(t, x, r1)

    def source(t, x, r1, r2, r3):
        return kpz.potential_bar(t, x)

    return dataclasses.replace(
        kpz.base,
        potential=_zero_potential,
        nonlinearity=nonlinearity,
        source=source,
        spatial_source=True,
        cole_hopf_beta=None,
    )


def build_transformed_problem(kpz: KpzProblem) -> ProblemSpec:
    """The linearised problem in v = exp(-beta u)."""
    beta = kpz.beta
    if beta == 0.0:
        raise ProblemError("Cole-Hopf transform undefined for beta = 0; use the base problem")
    base = kpz.base
    potential, transport = kpz.potential, kpz.transport

    def transformed_potential(t, x):
        return -beta * np.asarray(potential(t, x), dtype=float)

    def nonlinearity(t, x, r1, r2):
        return transport(t, x, (1.0 - r1) / beta)

    def source(t, x, r1, r2, r3):
        return np.zeros(x.shape[:-1] + (base.dim_m,))

    def initial(x):
        return cole_hopf(base.initial(x), beta)

    return dataclasses.replace(
        base,
        name=f"{base.name}-cole-hopf",
        potential=transformed_potential,
        nonlinearity=nonlinearity,
        source=source,
        initial=initial,
        spatial_source=True,
        cole_hopf_beta=beta,
    )


def build_direct_problem(kpz: KpzProblem) -> ProblemSpec:
    """The untransformed equation, with -beta <a grad u, grad u> as a state-dependent source."""
    if kpz.beta == 0.0:
        return base_problem(kpz)
    beta = kpz.beta
    base = kpz.base
    transport = kpz.transport

    def nonlinearity(t, x, r1, r2):
        return transport(t, x, phi_beta(r1, beta))

    def source(t, x, r1, r2, r3):
        a = np.broadcast_to(base.diffusion(t, x), x.shape[:-1] + (base.dim_d, base.dim_d))
        quadratic = np.einsum("...ij,...im,...jm->...m", a, r2, r2)
        return -beta * quadratic + kpz.potential_bar(t, x)

    return dataclasses.replace(
        base,
        name=f"{base.name}-direct",
        potential=_zero_potential,
        nonlinearity=nonlinearity,
        source=source,
        spatial_source=False,
        cole_hopf_beta=None,
    )


def _log_inverse(v: np.ndarray, beta: float) -> np.ndarray:
    bad = ~(v > 0)
    if bad.any():
        k, node, _ = np.argwhere(bad)[0]
        raise PositivityError(
            f"Cole-Hopf field lost positivity at slice {k}, node {node} (v={v[k, node].min():.3g})",
            location=(int(k), int(node)),
        )
    return -np.log(v) / beta


def invert_solution(field: PsiField | FdSolution, beta: float) -> PsiField | FdSolution:
    """u = -log(v) / beta on every slice; gradients and stderr are carried through."""
    if beta == 0.0:
        raise ProblemError("cannot invert a Cole-Hopf field with beta = 0")
    v = field.values
    u = _log_inverse(v, beta)
    if isinstance(field, FdSolution):
        return dataclasses.replace(field, values=u)
    gradients = None
    if field.gradients is not None:
        gradients = -field.gradients / (beta * v[:, :, None, :])
    stderr = field.stderr / (abs(beta) * v)
    logger.debug("inverted Cole-Hopf field, min v = %.3g", float(v.min()))
    return PsiField(field.grid, field.lattice, u, stderr, gradients, provenance=f"{field.provenance}+cole-hopf")
