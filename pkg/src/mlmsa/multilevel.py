"""Multilevel estimation: level schedules, collapsing-sum assembly, cost.

Given a target precision eps, :func:`schedule_levels` picks the deepest
level L (so the level-L bias is within eps) and per-level iteration
budgets n_l ~ c_n eps**-2 delta_l**((min(alpha*zeta, beta) + kappa)/2),
each level running with the constant step 1/n_l.  :func:`ml_estimate`
then runs one single-level pass at level 0 and one coupled increment pass
per level 1..L, all on disjoint seed streams, and assembles the telescoped
estimate theta_hat = est_0 + sum_l increment_l.  The per-step cost of a
level-l chain is delta_l**-kappa; a coupled run pays for both of its
chains.

The analyzed regime needs min(alpha*zeta, beta) > kappa, in which case
the mean square error is O(eps**2) at total cost O(eps**-2); equality
min(alpha*zeta, beta) = kappa is accepted with the cost annotation
O(eps**-2 log(eps)**2); anything below is rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    NumericalError,
    ParameterError,
    RateParameters,
    ReprojectionFamily,
    make_step_schedule,
)
from .engine import _run_ensemble
from .exact import level_root
from .model import FiniteLevelModel

__all__ = [
    "LevelPlan",
    "schedule_levels",
    "MLEstimate",
    "ml_estimate",
    "MseCostRow",
    "MseCostResult",
    "mse_cost_experiment",
]


def _ceil_stable(v: float) -> int:
    # guard against 2.0000000000000004-style float fuzz inflating a ceil
    return int(math.ceil(v - 1e-12))


@dataclass(frozen=True)
class LevelPlan:
    """Level schedule derived from a target precision."""

    epsilon: float
    L: int
    n_l: tuple[int, ...]          # iterations per level, indices 0..L
    gamma_l: tuple[float, ...]    # constant step 1/n_l per level
    predicted_cost: float         # sum_l n_l * delta_l**-kappa (fine chain only)
    rates: RateParameters
    c_n: float
    n_min: int
    cost_note: str                # complexity annotation for the chosen regime

    def __post_init__(self):
        if self.L < 1:
            raise ParameterError(f"plan must have L >= 1, got {self.L}")
        if len(self.n_l) != self.L + 1:
            raise ParameterError("n_l must have one entry per level 0..L")
        if any(n < self.n_min for n in self.n_l):
            raise ParameterError("every level budget must be >= n_min")
        if not math.isfinite(self.predicted_cost):
            raise ParameterError("predicted cost must be finite")

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "L": self.L,
            "n_l": list(self.n_l),
            "gamma_l": list(self.gamma_l),
            "predicted_cost": self.predicted_cost,
            "rates": {"alpha": self.rates.alpha, "beta": self.rates.beta,
                      "zeta": self.rates.zeta, "kappa": self.rates.kappa},
            "c_n": self.c_n,
            "n_min": self.n_min,
            "cost_note": self.cost_note,
        }


def schedule_levels(epsilon: float, rates: RateParameters, n_min: int = 100,
                    c_n: float = 1.0) -> LevelPlan:
    """Level schedule for target precision eps in (0, 1).

    L = ceil(log2(1/eps)/alpha) makes the deepest-level bias
    delta_L**alpha <= eps; the budgets decay geometrically in the level so
    the summed cost stays O(eps**-2).  c_n scales every budget (the
    asymptotic schedule fixes budgets only up to a constant) and n_min
    floors them so desk-scale runs keep nondegenerate level samples.
    """
    if not (0.0 < epsilon < 1.0):
        raise ParameterError(f"epsilon must lie in (0, 1), got {epsilon}")
    if c_n <= 0:
        raise ParameterError(f"c_n must be positive, got {c_n}")
    if not isinstance(n_min, int) or n_min < 1:
        raise ParameterError(f"n_min must be a positive integer, got {n_min!r}")
    v = rates.variance_rate
    kappa = rates.kappa
    if v < kappa - 1e-12:
        raise ParameterError(
            f"min(alpha*zeta, beta) = {v} < kappa = {kappa}: outside the analyzed cost "
            "regime (per-level budgets would not sum to O(eps**-2))")
    boundary = abs(v - kappa) <= 1e-12
    L = max(1, _ceil_stable(math.log2(1.0 / epsilon) / rates.alpha))
    expo = 0.5 * (v + kappa)
    n_l, gamma_l, cost = [], [], 0.0
    for l in range(L + 1):
        delta = 2.0 ** (-l)
        n = max(n_min, _ceil_stable(c_n * epsilon ** -2 * delta ** expo))
        n_l.append(n)
        gamma_l.append(1.0 / n)
        cost += n * delta ** -kappa
    note = "cost O(eps^-2 log(eps)^2)" if boundary else "cost O(eps^-2)"
    return LevelPlan(epsilon=float(epsilon), L=L, n_l=tuple(n_l), gamma_l=tuple(gamma_l),
                     predicted_cost=float(cost), rates=rates, c_n=float(c_n),
                     n_min=n_min, cost_note=note)


@dataclass(frozen=True)
class MLEstimate:
    """Assembled multilevel estimate.

    level_estimates[0] is the level-0 estimate and level_estimates[l] the
    level-l increment estimate; theta_hat is their left-to-right sum.
    seeds records (root_seed, spawn_index) per level: level l runs on the
    l-th child stream of SeedSequence(root_seed).
    """

    theta_hat: float
    level_estimates: tuple[float, ...]
    realized_cost: float
    seeds: tuple[tuple[int, int], ...]
    plan: LevelPlan = field(repr=False)


def _level_rngs(root_seeds, L: int, l: int):
    return [np.random.default_rng(np.random.SeedSequence(rs).spawn(L + 1)[l])
            for rs in root_seeds]


def _run_plan_ensemble(model: FiniteLevelModel, plan: LevelPlan, root_seeds,
                       reproj: ReprojectionFamily, theta0: float,
                       coupling: str) -> tuple[np.ndarray, np.ndarray, float]:
    """Run every level of the plan for all replicates at once.

    Returns (per-level estimates of shape (L+1, R), assembled theta_hat of
    shape (R,), realized cost of a single replicate)."""
    kappa = plan.rates.kappa
    R = len(root_seeds)
    estimates = np.empty((plan.L + 1, R))
    cost = 0.0
    for l in range(plan.L + 1):
        n = plan.n_l[l]
        sched = make_step_schedule("constant", plan.gamma_l[l], n_total=n)
        rngs = _level_rngs(root_seeds, plan.L, l)
        try:
            if l == 0:
                st, _ = _run_ensemble(model, 0, sched, reproj, n, rngs, theta0, None)
                estimates[0] = st.theta
                cost += n * 1.0  # delta_0**-kappa = 1
            else:
                st, _ = _run_ensemble(model, l, sched, reproj, n, rngs,
                                      theta0, None, theta0, None,
                                      coupled=True, coupling=coupling)
                estimates[l] = st.theta - st.theta_bar
                cost += n * (2.0 ** (l * kappa) + 2.0 ** ((l - 1) * kappa))
        except NumericalError as exc:
            raise NumericalError(f"level {l} run aborted: {exc}") from exc
    theta_hat = estimates[0].copy()
    for l in range(1, plan.L + 1):
        theta_hat = theta_hat + estimates[l]
    return estimates, theta_hat, cost


def ml_estimate(model: FiniteLevelModel, plan: LevelPlan, seed: int,
                reproj: ReprojectionFamily | None = None, theta0: float = 0.0,
                coupling: str = "crn") -> MLEstimate:
    """One multilevel estimate under the given plan.

    Level runs use disjoint child streams of SeedSequence(seed), so they
    are exchangeable: executing levels in any order gives the same
    per-level results.  The assembly sums level estimates in level order.
    """
    if reproj is None:
        reproj = ReprojectionFamily(2.0, 1.0)
    estimates, theta_hat, cost = _run_plan_ensemble(model, plan, [seed], reproj,
                                                    theta0, coupling)
    return MLEstimate(theta_hat=float(theta_hat[0]),
                      level_estimates=tuple(float(v) for v in estimates[:, 0]),
                      realized_cost=float(cost),
                      seeds=tuple((int(seed), l) for l in range(plan.L + 1)),
                      plan=plan)


@dataclass(frozen=True)
class MseCostRow:
    epsilon: float
    mse: float
    mean_cost: float
    stderr_mse: float


@dataclass(frozen=True)
class MseCostResult:
    """Replicated mean-square-error/cost curve against the limit root."""

    rows: tuple[MseCostRow, ...]
    cost_slope: float        # slope of log(mean_cost) against log(epsilon)
    theta_reference: float   # the limit root the MSE is measured against
    replicates: int

    def mse_ratio_drift(self) -> float:
        """max over eps of MSE/eps**2 divided by its min (schedule health)."""
        ratios = [r.mse / r.epsilon ** 2 for r in self.rows]
        return max(ratios) / min(ratios)


def mse_cost_experiment(model: FiniteLevelModel, epsilons, R: int, seed0: int,
                        rates: RateParameters | None = None, n_min: int = 100,
                        c_n: float = 1.0, reproj: ReprojectionFamily | None = None,
                        theta0: float = 0.0, coupling: str = "crn") -> MseCostResult:
    """Empirical MSE and cost of the multilevel estimator per precision.

    For each eps: R independent estimates (replicate r rooted at
    seed0 + r), MSE against the exact limit root, replicate-mean realized
    cost.  The log-log slope of cost against eps should sit near -2 in the
    analyzed regime.
    """
    epsilons = [float(e) for e in epsilons]
    if len(epsilons) < 3 or any(b >= a for a, b in zip(epsilons, epsilons[1:])):
        raise ParameterError("epsilons must be strictly decreasing with at least 3 entries")
    if R < 50:
        raise ParameterError(f"need R >= 50 replicates, got {R}")
    if rates is None:
        rates = RateParameters(alpha=model.beta0, beta=model.beta0, zeta=1.0, kappa=0.5)
    if reproj is None:
        reproj = ReprojectionFamily(2.0, 1.0)
    truth = level_root(model, math.inf)
    root_seeds = [seed0 + r for r in range(R)]
    rows = []
    for eps in epsilons:
        plan = schedule_levels(eps, rates, n_min=n_min, c_n=c_n)
        _, theta_hats, cost = _run_plan_ensemble(model, plan, root_seeds, reproj,
                                                 theta0, coupling)
        sq = (theta_hats - truth) ** 2
        rows.append(MseCostRow(epsilon=eps, mse=float(sq.mean()), mean_cost=float(cost),
                               stderr_mse=float(sq.std(ddof=1) / math.sqrt(R))))
    slope = float(np.polyfit(np.log([r.epsilon for r in rows]),
                             np.log([r.mean_cost for r in rows]), 1)[0])
    return MseCostResult(rows=tuple(rows), cost_slope=slope,
                         theta_reference=float(truth), replicates=R)
