"""Stochastic simulation of the root-finding procedures.

Three procedures are provided: single-level stochastic approximation with
reprojection (:func:`msa_run`), the coupled level-increment variant that
advances a fine and a coarse chain with shared step sizes
(:func:`coupled_msa_run`), and a replicated estimator of the increment
CLT variance (:func:`empirical_clt_variance`).

One iteration is: sample the next chain state from the Metropolis kernel
at the current parameter, take the tentative Robbins-Monro step
theta + gamma_n * H(theta, X_n) evaluated at the fresh state, then either
accept it (if it lies in the current constraint set) or reset to the
initial parameter and enlarge the set.  On reset the chain state is
restored to its initial value as well; this choice is recorded on the
trajectory so output consumers can see it.

Determinism contract: every run owns a generator seeded from its explicit
seed, each step consumes a fixed number of uniforms (two per step for a
single chain and the CRN coupling, four for the independent coupling,
after one integer draw per chain for an unconfigured initial state), and
identical (arguments, seed) reproduce bit-identical trajectories.
Replicated estimators seed replicate i with seed0 + i; replicates are
mutually independent and are executed as one vectorized ensemble.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import NumericalError, ParameterError, ReprojectionFamily, StepSchedule
from .model import FiniteLevelModel, _step_diffs, level_statistic

__all__ = [
    "Trajectory",
    "CoupledTrajectory",
    "msa_run",
    "coupled_msa_run",
    "CLTVarianceEstimate",
    "empirical_clt_variance",
]

_CHUNK = 8192


@dataclass(frozen=True)
class Trajectory:
    """Single-level run record; paths have length n_steps + 1 (entry 0 is
    the initial condition)."""

    level: int | float
    seed: int
    theta_path: np.ndarray
    x_path: np.ndarray
    psi_path: np.ndarray
    reprojection_events: tuple[int, ...]
    theta0: float
    x0: int
    resets_state: bool = True  # reprojection restores x to x0 as well as theta

    @property
    def theta_final(self) -> float:
        return float(self.theta_path[-1])

    def validate_containment(self, family: ReprojectionFamily) -> None:
        """Check theta_n in K_{psi_n} for every n and that psi increments
        exactly at the recorded reprojection events."""
        bounds = family.r0 + family.growth * self.psi_path
        if np.any(np.abs(self.theta_path) > bounds):
            raise NumericalError("containment violated: theta left its constraint set")
        jumps = np.flatnonzero(np.diff(self.psi_path) != 0) + 1
        if not np.array_equal(jumps, np.asarray(self.reprojection_events, dtype=jumps.dtype)):
            raise NumericalError("psi jumps do not match recorded reprojection events")
        if np.any(np.diff(self.psi_path) < 0):
            raise NumericalError("psi must be nondecreasing")


@dataclass(frozen=True)
class CoupledTrajectory:
    """Coupled run record; the two chains share psi and reset together."""

    level: int
    seed: int
    coupling: str
    fine_theta_path: np.ndarray
    coarse_theta_path: np.ndarray
    fine_x_path: np.ndarray
    coarse_x_path: np.ndarray
    psi_path: np.ndarray
    reprojection_events: tuple[int, ...]
    theta0: float
    theta0_bar: float
    x0: int
    x0_bar: int
    resets_state: bool = True

    @property
    def increments(self) -> np.ndarray:
        return self.fine_theta_path - self.coarse_theta_path

    @property
    def increment_final(self) -> float:
        return float(self.fine_theta_path[-1] - self.coarse_theta_path[-1])

    def validate_containment(self, family: ReprojectionFamily) -> None:
        bounds = family.r0 + family.growth * self.psi_path
        if np.any(np.abs(self.fine_theta_path) > bounds) or \
                np.any(np.abs(self.coarse_theta_path) > bounds):
            raise NumericalError("containment violated: a parameter left its constraint set")
        jumps = np.flatnonzero(np.diff(self.psi_path) != 0) + 1
        if not np.array_equal(jumps, np.asarray(self.reprojection_events, dtype=jumps.dtype)):
            raise NumericalError("psi jumps do not match recorded reprojection events")


class _Ensemble:
    """Vectorized replicate state for the stepping loop (internal)."""

    def __init__(self, rngs, m, theta0, theta0_bar, x0, x0_bar, coupled):
        R = len(rngs)
        self.rngs = rngs
        self.m = m
        self.coupled = coupled
        self.theta0 = np.full(R, theta0, dtype=float)
        self.x0 = np.empty(R, dtype=np.int64)
        for i, rng in enumerate(rngs):
            self.x0[i] = rng.integers(m) if x0 is None else x0
        self.theta = self.theta0.copy()
        self.x = self.x0.copy()
        if coupled:
            self.theta0_bar = np.full(R, theta0_bar, dtype=float)
            # an unconfigured coarse chain starts at the fine chain's state:
            # the pair begins coalesced, which is what the coupling is for
            self.x0_bar = self.x0.copy() if x0_bar is None else np.full(R, x0_bar, np.int64)
            self.theta_bar = self.theta0_bar.copy()
            self.x_bar = self.x0_bar.copy()
        self.psi = np.zeros(R, dtype=np.int64)
        self.last_reproj = np.zeros(R, dtype=np.int64)


def _move(x, d, u_acc, theta, up, dn, m):
    """Vectorized Metropolis move given direction and acceptance uniform."""
    xp = x + d
    valid = (xp >= 0) & (xp < m)
    diff = np.where(d == 1, up[x], dn[x])
    acc = np.where(valid, np.exp(np.minimum(theta * diff, 0.0)), 0.0)
    return np.where(u_acc < acc, np.clip(xp, 0, m - 1), x)


def _run_ensemble(model: FiniteLevelModel, l, schedule: StepSchedule,
                  family: ReprojectionFamily, n_steps: int, rngs,
                  theta0: float, x0, theta0_bar: float = 0.0, x0_bar=None,
                  coupled: bool = False, coupling: str = "crn",
                  record: bool = False):
    """Advance all replicates n_steps; the inner loop is vectorized across
    replicates and uniforms are pre-drawn per chunk from each replicate's
    own generator (batching does not change a generator's stream)."""
    if coupling not in ("crn", "independent"):
        raise ParameterError(f"coupling must be 'crn' or 'independent', got {coupling!r}")
    m = model.m
    R = len(rngs)
    st = _Ensemble(rngs, m, theta0, theta0_bar, x0, x0_bar, coupled)
    s_f = level_statistic(model, l)
    up_f, dn_f = _step_diffs(model, l)
    if coupled:
        s_c = level_statistic(model, l - 1)
        up_c, dn_c = _step_diffs(model, l - 1)
    gammas = schedule.step_sizes(n_steps)
    n_uniform = (4 if coupling == "independent" else 2) if coupled else 2
    paths = None
    if record:
        paths = {"theta": np.empty((n_steps + 1, R)), "x": np.empty((n_steps + 1, R), np.int64),
                 "psi": np.empty((n_steps + 1, R), np.int64), "events": [[] for _ in range(R)]}
        paths["theta"][0], paths["x"][0], paths["psi"][0] = st.theta, st.x, st.psi
        if coupled:
            paths["theta_bar"] = np.empty((n_steps + 1, R))
            paths["x_bar"] = np.empty((n_steps + 1, R), np.int64)
            paths["theta_bar"][0], paths["x_bar"][0] = st.theta_bar, st.x_bar
    step = 0
    while step < n_steps:
        span = min(_CHUNK, n_steps - step)
        U = np.stack([rng.random((span, n_uniform)) for rng in rngs], axis=1)
        for t in range(span):
            step += 1
            u = U[t]
            d = np.where(u[:, 0] < 0.5, 1, -1)
            xn = _move(st.x, d, u[:, 1], st.theta, up_f, dn_f, m)
            theta_half = st.theta + gammas[step - 1] * (s_f[xn] - st.theta)
            if coupled:
                if coupling == "crn":
                    yn = _move(st.x_bar, d, u[:, 1], st.theta_bar, up_c, dn_c, m)
                else:
                    dc = np.where(u[:, 2] < 0.5, 1, -1)
                    yn = _move(st.x_bar, dc, u[:, 3], st.theta_bar, up_c, dn_c, m)
                theta_bar_half = st.theta_bar + gammas[step - 1] * (s_c[yn] - st.theta_bar)
                bound = family.r0 + family.growth * st.psi
                inside = (np.abs(theta_half) <= bound) & (np.abs(theta_bar_half) <= bound)
                st.theta_bar = np.where(inside, theta_bar_half, st.theta0_bar)
                st.x_bar = np.where(inside, yn, st.x0_bar)
            else:
                bound = family.r0 + family.growth * st.psi
                inside = np.abs(theta_half) <= bound
            st.theta = np.where(inside, theta_half, st.theta0)
            st.x = np.where(inside, xn, st.x0)
            st.psi = st.psi + ~inside
            st.last_reproj = np.where(~inside, step, st.last_reproj)
            if record:
                paths["theta"][step], paths["x"][step], paths["psi"][step] = st.theta, st.x, st.psi
                if coupled:
                    paths["theta_bar"][step], paths["x_bar"][step] = st.theta_bar, st.x_bar
                for r in np.flatnonzero(~inside):
                    paths["events"][r].append(step)
        if not np.all(np.isfinite(st.theta)):
            raise NumericalError(f"non-finite parameter encountered by step {step}")
        if coupled and not np.all(np.isfinite(st.theta_bar)):
            raise NumericalError(f"non-finite coarse parameter encountered by step {step}")
    return st, paths


def msa_run(model: FiniteLevelModel, l, schedule: StepSchedule,
            reproj: ReprojectionFamily, n_steps: int, theta0: float,
            x0: int | None, seed: int) -> Trajectory:
    """Single-level stochastic approximation run.

    theta0 must lie in the initial constraint set.  x0 = None draws the
    initial state uniformly from the grid (one integer draw before the
    per-step uniforms).
    """
    if n_steps < 1:
        raise ParameterError(f"n_steps must be >= 1, got {n_steps}")
    if not reproj.contains(theta0, 0):
        raise ParameterError(f"theta0={theta0} is outside the initial constraint set")
    rng = np.random.default_rng(seed)
    st, paths = _run_ensemble(model, l, schedule, reproj, n_steps, [rng],
                              theta0, x0, record=True)
    return Trajectory(level=l, seed=seed,
                      theta_path=paths["theta"][:, 0].copy(),
                      x_path=paths["x"][:, 0].copy(),
                      psi_path=paths["psi"][:, 0].copy(),
                      reprojection_events=tuple(paths["events"][0]),
                      theta0=theta0, x0=int(st.x0[0]))


def coupled_msa_run(model: FiniteLevelModel, l, schedule: StepSchedule,
                    reproj: ReprojectionFamily, n_steps: int, seed: int,
                    theta0: float = 0.0, theta0_bar: float = 0.0,
                    x0: int | None = None, x0_bar: int | None = None,
                    coupling: str = "crn") -> CoupledTrajectory:
    """Coupled level-increment run: fine chain at level l, coarse at l - 1,
    both parameters updated with the same step sizes, states advanced by
    one coupled transition per iteration, reprojection joint.

    With x0 and x0_bar unconfigured the pair starts at one shared uniform
    draw (coalesced), which is the point of the coupling; pass explicit
    distinct states to study excursions.
    """
    if l == math.inf or l < 1:
        raise ParameterError(f"coupled run needs a finite level l >= 1, got {l!r}")
    if n_steps < 1:
        raise ParameterError(f"n_steps must be >= 1, got {n_steps}")
    if not (reproj.contains(theta0, 0) and reproj.contains(theta0_bar, 0)):
        raise ParameterError("initial parameters must lie in the initial constraint set")
    rng = np.random.default_rng(seed)
    st, paths = _run_ensemble(model, l, schedule, reproj, n_steps, [rng],
                              theta0, x0, theta0_bar, x0_bar,
                              coupled=True, coupling=coupling, record=True)
    return CoupledTrajectory(level=int(l), seed=seed, coupling=coupling,
                             fine_theta_path=paths["theta"][:, 0].copy(),
                             coarse_theta_path=paths["theta_bar"][:, 0].copy(),
                             fine_x_path=paths["x"][:, 0].copy(),
                             coarse_x_path=paths["x_bar"][:, 0].copy(),
                             psi_path=paths["psi"][:, 0].copy(),
                             reprojection_events=tuple(paths["events"][0]),
                             theta0=theta0, theta0_bar=theta0_bar,
                             x0=int(st.x0[0]), x0_bar=int(st.x0_bar[0]))


@dataclass(frozen=True)
class CLTVarianceEstimate:
    """Replicated estimate of the increment CLT variance.

    estimate is gamma_n**-1 times the sample variance of the final
    increments over the kept replicates; stderr is its jackknife standard
    error.  Replicates that reprojected in the second half of the run are
    discarded (the CLT is conditional on the iterates having settled).
    """

    estimate: float
    stderr: float
    gamma_n: float
    n_steps: int
    n_kept: int
    n_discarded: int
    increments: np.ndarray = field(repr=False)


def empirical_clt_variance(model: FiniteLevelModel, l, schedule: StepSchedule,
                           n_steps: int, R: int, seed0: int,
                           reproj: ReprojectionFamily | None = None,
                           coupling: str = "crn",
                           theta0: float = 0.0, theta0_bar: float = 0.0) -> CLTVarianceEstimate:
    """Estimate the increment CLT variance from R independent coupled runs.

    Requires a polynomial schedule (the CLT scaling needs decaying steps)
    and R >= 100.  Replicate i is seeded seed0 + i and is identical to
    coupled_msa_run with that seed; the ensemble is advanced jointly for
    speed.  Warns when more than 20% of replicates are discarded by the
    settling rule, which indicates a reprojection family that is too
    tight for the model.
    """
    if R < 100:
        raise ParameterError(f"need R >= 100 replicates, got {R}")
    if schedule.kind != "polynomial":
        raise ParameterError("CLT variance estimation needs a polynomial schedule")
    if reproj is None:
        reproj = ReprojectionFamily(2.0, 1.0)
    rngs = [np.random.default_rng(seed0 + i) for i in range(R)]
    st, _ = _run_ensemble(model, l, schedule, reproj, n_steps, rngs,
                          theta0, None, theta0_bar, None,
                          coupled=True, coupling=coupling, record=False)
    keep = st.last_reproj <= n_steps // 2
    n_disc = int(R - keep.sum())
    if n_disc > 0.2 * R:
        warnings.warn(f"{n_disc}/{R} replicates reprojected late (reprojection family too "
                      "tight for this model); estimate may be biased", stacklevel=2)
    inc = (st.theta - st.theta_bar)[keep]
    n = inc.size
    if n < 3:
        raise NumericalError(f"only {n} replicates survived the settling rule")
    gamma_n = schedule.step_size(n_steps)
    est = float(np.var(inc, ddof=1) / gamma_n)
    # leave-one-out variances in closed form for the jackknife
    s1, s2 = inc.sum(), np.dot(inc, inc)
    loo_mean = (s1 - inc) / (n - 1)
    loo_var = (s2 - inc ** 2 - (n - 1) * loo_mean ** 2) / (n - 2)
    jack = loo_var / gamma_n
    stderr = float(np.sqrt((n - 1) / n * np.sum((jack - jack.mean()) ** 2)))
    return CLTVarianceEstimate(estimate=est, stderr=stderr, gamma_n=float(gamma_n),
                               n_steps=n_steps, n_kept=n, n_discarded=n_disc,
                               increments=inc)
