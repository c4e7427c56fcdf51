"""Problem-independent building blocks: levels, step schedules, reprojection.

Everything here is immutable after construction and safe to share across
threads.  Stochastic code lives in :mod:`mlmsa.engine`; this module only
encodes the deterministic contracts (step-size admissibility, nested
constraint sets, rate parameters).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ParameterError",
    "NumericalError",
    "Level",
    "StepSchedule",
    "make_step_schedule",
    "ReprojectionFamily",
    "RateParameters",
]


class ParameterError(ValueError):
    """A precondition on user-supplied parameters is violated."""


class NumericalError(RuntimeError):
    """A numerical computation failed a correctness check."""


@dataclass(frozen=True)
class Level:
    """Accuracy level l with mesh proxy delta = 2**-l (l = 0 is coarsest)."""

    l: int

    def __post_init__(self):
        if not isinstance(self.l, int) or isinstance(self.l, bool) or self.l < 0:
            raise ParameterError(f"level index must be a nonnegative integer, got {self.l!r}")

    @property
    def delta(self) -> float:
        return 2.0 ** (-self.l)


def level_delta(l) -> float:
    """Mesh proxy 2**-l; accepts math.inf for the limit model (delta 0)."""
    return 2.0 ** (-l) if l != math.inf else 0.0


@dataclass(frozen=True)
class StepSchedule:
    """Step-size sequence gamma_n, either gamma0 * n**-rho or constant gamma0.

    Polynomial schedules are only admissible for rho in (1/2, 1), which
    guarantees the three conditions needed for almost-sure convergence and
    the CLT: divergent step sum, square-summable steps, and
    log(gamma_n/gamma_{n-1}) = o(gamma_n).  Constant schedules are used by
    the multilevel driver, where the step is tied to the iteration budget
    of each level; they deliberately do not satisfy the decay conditions.
    """

    kind: str  # "polynomial" | "constant"
    gamma0: float
    rho: float | None
    n_total: int

    def step_size(self, n: int) -> float:
        """gamma_n for n >= 1."""
        if self.kind == "constant":
            return self.gamma0
        return self.gamma0 * float(n) ** (-self.rho)

    def step_sizes(self, n_steps: int | None = None) -> np.ndarray:
        """Vector (gamma_1, ..., gamma_n)."""
        n = self.n_total if n_steps is None else n_steps
        if self.kind == "constant":
            return np.full(n, self.gamma0)
        return self.gamma0 * np.arange(1, n + 1, dtype=float) ** (-self.rho)


def make_step_schedule(kind: str, gamma0: float, rho: float | None = None,
                       n_total: int = 1) -> StepSchedule:
    """Validated step-size schedule.

    Rejects polynomial exponents outside (1/2, 1) with a diagnostic naming
    the admissibility condition that fails:

    - rho <= 1/2 breaks square summability (sum of gamma_n**2 diverges),
    - rho == 1 breaks the ratio condition (log(gamma_n/gamma_{n-1}) is of
      exact order gamma_n, not smaller),
    - rho > 1 breaks divergence of the step sum.

    Constant schedules allow gamma0 == 0 so that frozen-parameter runs can
    reuse the simulation engines as plain Markov-chain samplers.
    """
    if kind not in ("polynomial", "constant"):
        raise ParameterError(f"schedule kind must be 'polynomial' or 'constant', got {kind!r}")
    if not isinstance(n_total, int) or n_total < 1:
        raise ParameterError(f"n_total must be a positive integer, got {n_total!r}")
    if kind == "constant":
        if gamma0 < 0:
            raise ParameterError(f"constant schedule needs gamma0 >= 0, got {gamma0}")
        return StepSchedule("constant", float(gamma0), None, n_total)
    if gamma0 <= 0:
        raise ParameterError(f"polynomial schedule needs gamma0 > 0, got {gamma0}")
    if rho is None:
        raise ParameterError("polynomial schedule needs an exponent rho")
    if rho <= 0.5:
        raise ParameterError(
            f"rho={rho} violates square summability: sum of gamma_n**2 is infinite for rho <= 1/2")
    if rho == 1.0:
        raise ParameterError(
            "rho=1 violates the ratio condition: log(gamma_n/gamma_{n-1})/gamma_n "
            "tends to -1/gamma0, not 0")
    if rho > 1.0:
        raise ParameterError(
            f"rho={rho} violates divergence: sum of gamma_n is finite for rho > 1")
    return StepSchedule("polynomial", float(gamma0), float(rho), n_total)


def ratio_diagnostic(schedule: StepSchedule, n_steps: int | None = None) -> np.ndarray:
    """|log(gamma_n/gamma_{n-1})| / gamma_n for n = 2..n; must decay to 0
    for an admissible polynomial schedule."""
    g = schedule.step_sizes(n_steps)
    if len(g) < 2:
        return np.empty(0)
    return np.abs(np.log(g[1:] / g[:-1])) / g[1:]


@dataclass(frozen=True)
class ReprojectionFamily:
    """Nested symmetric intervals K_k = [-(r0 + growth*k), r0 + growth*k].

    The family covers the whole real line as k grows, which is all the
    stability argument needs; the linear growth rate is a free choice.
    """

    r0: float
    growth: float

    def __post_init__(self):
        if self.r0 <= 0:
            raise ParameterError(f"r0 must be positive, got {self.r0}")
        if self.growth <= 0:
            raise ParameterError(f"growth must be positive, got {self.growth}")

    def radius(self, k: int) -> float:
        if k < 0:
            raise ParameterError(f"set index must be >= 0, got {k}")
        return self.r0 + self.growth * k

    def bounds(self, k: int) -> tuple[float, float]:
        """Closed interval for constraint-set index k."""
        r = self.radius(k)
        return (-r, r)

    def contains(self, theta: float, k: int) -> bool:
        r = self.radius(k)
        return -r <= theta <= r

    def index_covering(self, theta: float) -> int:
        """Smallest k whose set contains theta (exists for any finite theta)."""
        if not math.isfinite(theta):
            raise ParameterError(f"theta must be finite, got {theta}")
        excess = abs(theta) - self.r0
        return 0 if excess <= 0 else math.ceil(excess / self.growth)


def reprojection_set(family: ReprojectionFamily, k: int) -> tuple[float, float]:
    """Closed interval of the k-th constraint set."""
    return family.bounds(k)


@dataclass(frozen=True)
class RateParameters:
    """Decay/cost exponents of a level hierarchy.

    alpha: bias rate of the per-level roots, |theta*_l - theta*| = O(delta_l**alpha).
    beta:  decay rate of kernel/stationary-law perturbations across levels.
    zeta:  Holder exponent of the theta-continuity bounds, in (1/2, 1].
    kappa: per-step cost exponent, cost of one level-l step = delta_l**-kappa.
    """

    alpha: float
    beta: float
    zeta: float
    kappa: float

    def __post_init__(self):
        if self.alpha <= 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if self.beta <= 0:
            raise ParameterError(f"beta must be positive, got {self.beta}")
        if not (0.5 < self.zeta <= 1.0):
            raise ParameterError(f"zeta must lie in (1/2, 1], got {self.zeta}")
        if self.kappa <= 0:
            raise ParameterError(f"kappa must be positive, got {self.kappa}")

    @property
    def variance_rate(self) -> float:
        """min(alpha*zeta, beta): decay rate of the increment variance."""
        return min(self.alpha * self.zeta, self.beta)
