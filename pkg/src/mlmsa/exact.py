"""Exact linear-algebra computations on finite-state chains.

Everything in this module is deterministic dense linear algebra: stationary
laws, Poisson-equation solutions, mean fields and their roots, the
asymptotic variance of the coupled level-increment estimator with its full
term breakdown, geometric-ergodicity rates, drift/minorization
certificates, and the decay-rate diagnostics that check the model's level
hierarchy behaves as advertised.

Conventions.  For a weight vector V >= 1, |f|_V = max_x |f(x)|/V(x); for
signed measures, ||mu - xi||_V = sum_y V(y)|mu(y) - xi(y)| (the V-weighted
total variation, which is the sup over |f| <= V of the integral gap); for
kernels, |||K1 - K2|||_V = max_x ||K1(x,.) - K2(x,.)||_V / V(x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .core import NumericalError, ParameterError
from .model import (
    FiniteLevelModel,
    coupled_kernel_matrix,
    kernel_matrix,
    level_statistic,
    lyapunov_vector,
    metric_matrix,
    target_density,
)

__all__ = [
    "stationary_distribution",
    "PoissonSolution",
    "poisson_solve",
    "poisson_series",
    "mean_field",
    "mean_field_derivative",
    "level_root",
    "VarianceReport",
    "asymptotic_variance",
    "GeometricRate",
    "estimate_geometric_rate",
    "ErgodicityCertificate",
    "certify_drift_minorization",
    "RateDiagnostics",
    "rate_diagnostics",
    "LemmaDiagnostics",
    "lemma_diagnostics",
    "fitted_log2_slope",
]

_ROOT_BRACKET = (-2.0, 2.0)
_ROOT_TOL = 1e-12


def _check_stochastic(K: np.ndarray) -> None:
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ParameterError(f"kernel must be square, got shape {K.shape}")
    if np.min(K) < -1e-12:
        raise ParameterError("kernel has negative entries")
    if np.max(np.abs(K.sum(axis=1) - 1.0)) > 1e-9:
        raise ParameterError("kernel rows do not sum to 1")


def stationary_distribution(K: np.ndarray, check_spectrum: bool = True) -> np.ndarray:
    """Unique stationary law of a row-stochastic matrix.

    Solved as a linear system: the balance equations (K - I)^T pi = 0 with
    one equation replaced by normalization.  Requires a unique stationary
    law and aperiodicity; chains failing the spectral check are rejected
    with the failed check named (multiple unit eigenvalues for a reducible
    chain, other unit-modulus eigenvalues for a periodic one).
    """
    _check_stochastic(K)
    n = K.shape[0]
    if check_spectrum:
        ev = np.linalg.eigvals(K)
        near_one = np.abs(ev - 1.0) < 1e-9
        if np.sum(near_one) != 1:
            raise NumericalError(
                f"spectral check failed: eigenvalue 1 has multiplicity {np.sum(near_one)} "
                "(chain has several closed classes; stationary law is not unique)")
        others = np.abs(ev[~near_one])
        if others.size and np.max(others) > 1.0 - 1e-9:
            raise NumericalError(
                f"spectral check failed: unit-modulus eigenvalue {np.max(others):.12f} != 1 "
                "(periodic chain)")
    A = (K - np.eye(n)).T
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        pi = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"stationary solve is singular: {exc}") from exc
    if np.min(pi) < -1e-10:
        raise NumericalError(f"stationary solve produced negative mass {np.min(pi):.3e}")
    pi = np.maximum(pi, 0.0)
    pi /= pi.sum()
    resid = np.max(np.abs(pi @ K - pi))
    if resid > 1e-9:
        raise NumericalError(f"stationary residual {resid:.3e} exceeds tolerance")
    return pi


@dataclass(frozen=True)
class PoissonSolution:
    """Solution g of g - K g = f - pi(f) with the centering pi(g) = 0."""

    g_hat: np.ndarray
    Kg_hat: np.ndarray
    centered_f: np.ndarray


def poisson_solve(K: np.ndarray, pi: np.ndarray, f: np.ndarray) -> PoissonSolution:
    """Poisson-equation solve through the fundamental matrix.

    Solves (I - K + 1 pi^T) g = f - pi(f), which automatically yields
    pi(g) = 0; g is recentred once more to scrub rounding.  The residual of
    the identity g - Kg = f - pi(f) is checked to 1e-10 and an
    ill-conditioned fundamental matrix is reported with its condition
    estimate.
    """
    _check_stochastic(K)
    if np.max(np.abs(pi @ K - pi)) > 1e-8:
        raise ParameterError("pi is not stationary for K")
    n = K.shape[0]
    centered = f - pi @ f
    M = np.eye(n) - K + np.outer(np.ones(n), pi)
    try:
        g = np.linalg.solve(M, centered)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"fundamental matrix is singular (condition estimate {np.linalg.cond(M):.3e})"
        ) from exc
    g = g - pi @ g
    Kg = K @ g
    resid = np.max(np.abs(g - Kg - centered))
    if resid > 1e-10:
        raise NumericalError(
            f"Poisson identity residual {resid:.3e} exceeds 1e-10 "
            f"(fundamental matrix condition {np.linalg.cond(M):.3e})")
    return PoissonSolution(g, Kg, centered)


def poisson_series(K: np.ndarray, pi: np.ndarray, f: np.ndarray,
                   n_terms: int = 200) -> np.ndarray:
    """Truncated-series reference sum_{n=0..N} (K^n - pi)(f).

    Deliberately independent of poisson_solve: straight power iteration,
    no fundamental matrix, no recentring.  Converges geometrically for an
    aperiodic chain with a unique stationary law.
    """
    mean = pi @ f
    acc = f - mean
    curr = f.copy()
    for _ in range(n_terms):
        curr = K @ curr
        acc = acc + (curr - mean)
    return acc


def mean_field(model: FiniteLevelModel, l, theta: float) -> float:
    """h_l(theta) = pi_{theta,l}(phi_l) - theta."""
    pi = target_density(model, l, theta)
    return float(pi @ level_statistic(model, l) - theta)


def mean_field_derivative(model: FiniteLevelModel, l, theta: float) -> float:
    """dh_l/dtheta = Var_{pi_{theta,l}}(phi_l) - 1 (tilt identity)."""
    pi = target_density(model, l, theta)
    s = level_statistic(model, l)
    mu = pi @ s
    return float(pi @ (s * s) - mu * mu - 1.0)


@lru_cache(maxsize=1024)
def level_root(model: FiniteLevelModel, l) -> float:
    """Unique root theta*_l of h_l, by bisection to |h| < 1e-12.

    The scaling |phi_l| <= 1 makes h strictly decreasing with
    h(-2) > 0 > h(2), so the bracket [-2, 2] always contains the root.
    """
    lo, hi = _ROOT_BRACKET
    h_lo, h_hi = mean_field(model, l, lo), mean_field(model, l, hi)
    if not (h_lo > 0.0 > h_hi):
        raise NumericalError(
            f"no sign change on bracket [{lo}, {hi}]: h({lo}) = {h_lo:.3e}, h({hi}) = {h_hi:.3e}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        h_mid = mean_field(model, l, mid)
        if abs(h_mid) < _ROOT_TOL:
            return mid
        if h_mid > 0.0:
            lo = mid
        else:
            hi = mid
    raise NumericalError(f"bisection did not reach |h| < {_ROOT_TOL} (level {l})")


@lru_cache(maxsize=128)
def _coupled_stationary(model: FiniteLevelModel, l, theta: float, theta_bar: float,
                        coupling: str) -> np.ndarray:
    pi = stationary_distribution(coupled_kernel_matrix(model, l, theta, theta_bar, coupling))
    pi.setflags(write=False)
    return pi


@dataclass(frozen=True)
class VarianceReport:
    """Asymptotic variance of the coupled level-increment estimator.

    sigma is the variance in the increment CLT; t1/t2 split it into the
    fine-marginal and coarse-marginal halves, the shared cross term divided
    evenly between them.  cross_term is the raw coupled expectation
    pi_check(g_f (x) g_c - K g_f (x) K g_c) without its prefactor.
    """

    level: int
    coupling: str
    sigma: float
    t1: float
    t2: float
    dh_l: float
    dh_lm1: float
    theta_star_l: float
    theta_star_lm1: float
    coupled_stationary: np.ndarray = field(repr=False)
    cross_term: float


def asymptotic_variance(model: FiniteLevelModel, l, coupling: str = "crn") -> VarianceReport:
    """Exact CLT variance of the level-l increment estimator.

    Assembles, at the pair of roots (theta*_l, theta*_{l-1}):

    - the two marginal terms, each the classical single-chain asymptotic
      variance pi(g^2 - (Kg)^2) of the update statistic H scaled by
      -(2 dh/dtheta)^-1, and
    - the cross term, the coupled-stationary expectation of
      g_f (x) g_c - K(g_f) (x) K(g_c) scaled by
      2 (dh_l/dtheta + dh_{l-1}/dtheta)^-1,

    where g is the Poisson solution for H at its root.  Under the
    independent coupling the cross expectation factorizes over centred
    functions and vanishes; common random numbers make it positive, which
    lowers sigma.
    """
    if l == math.inf or l < 1:
        raise ParameterError(f"variance needs a finite level l >= 1, got {l!r}")
    th_f = level_root(model, l)
    th_c = level_root(model, l - 1)
    dh_f = mean_field_derivative(model, l, th_f)
    dh_c = mean_field_derivative(model, l - 1, th_c)
    if dh_f >= 0.0 or dh_c >= 0.0:
        raise NumericalError(f"mean-field derivatives must be negative, got {dh_f}, {dh_c}")

    sol_f = _poisson_for(model, l, th_f)
    sol_c = _poisson_for(model, l - 1, th_c)
    A, KA = sol_f.g_hat, sol_f.Kg_hat
    B, KB = sol_c.g_hat, sol_c.Kg_hat
    pc = _coupled_stationary(model, l, th_f, th_c, coupling)
    P = pc.reshape(model.m, model.m)
    marg_f = P.sum(axis=1)
    marg_c = P.sum(axis=0)
    fine_raw = marg_f @ (A * A) - marg_f @ (KA * KA)
    coarse_raw = marg_c @ (B * B) - marg_c @ (KB * KB)
    cross_raw = A @ P @ B - KA @ P @ KB
    pref_f = -1.0 / (2.0 * dh_f)
    pref_c = -1.0 / (2.0 * dh_c)
    pref_x = 1.0 / (dh_f + dh_c)
    t1 = pref_f * fine_raw + pref_x * cross_raw
    t2 = pref_c * coarse_raw + pref_x * cross_raw
    sigma = t1 + t2
    if sigma < -1e-10:
        raise NumericalError(
            f"asymptotic variance {sigma:.3e} is negative beyond tolerance "
            "(formula implementation bug)")
    return VarianceReport(level=int(l), coupling=coupling, sigma=sigma, t1=t1, t2=t2,
                          dh_l=dh_f, dh_lm1=dh_c, theta_star_l=th_f, theta_star_lm1=th_c,
                          coupled_stationary=pc, cross_term=cross_raw)


@dataclass(frozen=True)
class GeometricRate:
    """Fitted geometric convergence rate with its spectral reference."""

    rho_hat: float
    slem: float  # second-largest eigenvalue modulus
    n_powers: int


def estimate_geometric_rate(K: np.ndarray, pi: np.ndarray, V: np.ndarray,
                            max_powers: int = 2000, n_probes: int = 6,
                            seed: int = 0) -> GeometricRate:
    """Fit rho in |(K^n - pi)(f)|_V <= C rho^n over a probe set |f| <= V.

    Probes are sign patterns times V (constant, alternating, and seeded
    random signs).  The decay of the probe maximum is fitted log-linearly
    past a short transient; the second-largest eigenvalue modulus is
    reported alongside as the spectral reference.
    """
    _check_stochastic(K)
    n = K.shape[0]
    rng = np.random.default_rng(seed)
    signs = [np.ones(n), (-1.0) ** np.arange(n)]
    while len(signs) < n_probes:
        signs.append(rng.choice([-1.0, 1.0], size=n))
    F = np.stack([V * s for s in signs], axis=1)
    means = pi @ F
    curr = F.copy()
    sup = []
    for _ in range(max_powers):
        curr = K @ curr
        sup.append(np.max(np.abs(curr - means) / V[:, None]))
        if sup[-1] < 1e-13 * max(sup[0], 1.0):
            break
    sup = np.asarray(sup)
    ev = np.abs(np.linalg.eigvals(K))
    order = np.argsort(-ev)
    slem = float(ev[order[1]]) if n > 1 else 0.0
    start = min(5, max(len(sup) - 3, 0))
    usable = sup[start:] > 1e-300
    if np.sum(usable) < 3:
        return GeometricRate(rho_hat=0.0, slem=slem, n_powers=len(sup))
    ns = np.arange(start + 1, len(sup) + 1)[usable]
    slope = np.polyfit(ns, np.log(sup[start:][usable]), 1)[0]
    return GeometricRate(rho_hat=float(np.exp(slope)), slem=slem, n_powers=len(sup))


@dataclass(frozen=True)
class ErgodicityCertificate:
    """Numerical drift/minorization certificate, uniform over a (theta, l) grid.

    The drift inequality K(V)(x) <= lambda_drift V(x) + b_drift 1_C(x)
    holds entrywise at every grid point with lambda_drift < 1; margins are
    folded into lambda_drift and b_drift so the certificate also survives
    parameters between grid points.  Minorization is certified for the
    n_steps_minor-fold kernel: K^n0(x, .) >= epsilon_minor nu_{theta,l}(.)
    for every state x, with nu_mass = inf over the grid of nu(C).
    One-step minorization is hopeless for a nearest-neighbour chain (rows
    have zeros), hence the multi-step form.
    """

    epsilon_minor: float
    small_set: tuple[int, ...]
    nu_mass: float
    lambda_drift: float
    b_drift: float
    rho_hat: float
    n_steps_minor: int
    thetas: tuple[float, ...]
    levels: tuple[int, ...]
    extended_states: tuple[int, ...]  # states added to the top-mass core


def certify_drift_minorization(model: FiniteLevelModel, levels, theta_grid,
                               ratio_margin: float = 0.05,
                               minor_target: float = 0.05,
                               n0_cap: int = 1 << 15) -> ErgodicityCertificate:
    """Search a uniform drift/minorization certificate over the grid.

    The small set starts as the union over the grid of the smallest
    top-mass state sets holding half the stationary mass; states whose
    worst-case drift ratio max K(V)/V is not below 1 are then moved into
    the set greedily (reflecting walls are the usual culprits).

    When the scan includes a flat target (theta = 0 makes V identically 1,
    so K(V)/V is 1 at every state) no proper small set can carry a
    lambda < 1 drift bound, and the certificate degenerates to the whole
    state space as its small set.  That is still a valid certificate for a
    finite chain: the inequality holds with the b-term everywhere, and the
    uniform-ergodicity content moves entirely into the multi-step
    minorization.
    """
    levels = [int(l) for l in levels]
    thetas = [float(t) for t in theta_grid]
    if not levels or not thetas:
        raise ParameterError("need at least one level and one theta")
    m = model.m
    kernels, vees = {}, {}
    core = np.zeros(m, dtype=bool)
    ratios = np.full(m, -np.inf)
    all_ratios = []
    for l in levels:
        for th in thetas:
            K = kernel_matrix(model, l, th)
            V = lyapunov_vector(model, l, th)
            kernels[(l, th)] = K
            vees[(l, th)] = V
            pi = target_density(model, l, th)
            order = np.argsort(-pi)
            take = np.searchsorted(np.cumsum(pi[order]), 0.5) + 1
            core[order[:take]] = True
            r = (K @ V) / V
            ratios = np.maximum(ratios, r)
            all_ratios.append(r)
    extended = []
    while np.any(~core):
        outside = ~core
        worst_ratio = np.max(ratios[outside])
        if worst_ratio < 1.0 - 1e-9:
            break
        grow = int(np.arange(m)[outside][np.argmax(ratios[outside])])
        core[grow] = True
        extended.append(grow)
    if np.all(core):
        # flat-target degeneracy: fall back to the worst sub-unit contraction
        pool = np.concatenate(all_ratios)
        pool = pool[pool < 1.0 - 1e-9]
        worst_ratio = float(np.max(pool)) if pool.size else 0.5
    lam = min(worst_ratio + ratio_margin, 1.0 - 1e-6)
    if lam <= worst_ratio:
        lam = 0.5 * (worst_ratio + 1.0)
    b = 0.0
    for (l, th), K in kernels.items():
        V = vees[(l, th)]
        b = max(b, np.max((K @ V - lam * V)[core], initial=0.0))
    b = 1.05 * b + 1e-9

    # multi-step minorization: smallest doubling n0 with colmin mass >= target
    n0 = m
    while True:
        eps = math.inf
        nu_mass = math.inf
        for (l, th), K in kernels.items():
            Kn = np.linalg.matrix_power(K, n0)
            colmin = Kn.min(axis=0)
            e = colmin.sum()
            eps = min(eps, e)
            if e > 0.0:
                nu_mass = min(nu_mass, colmin[core].sum() / e)
        if eps >= minor_target or n0 >= n0_cap:
            break
        n0 *= 2
    if not (0.0 < eps < 1.0):
        raise NumericalError(
            f"minorization mass {eps:.3e} at n0={n0} not in (0, 1); chain mixes too slowly")

    rho = 0.0
    for (l, th), K in kernels.items():
        pi = target_density(model, l, th)
        rho = max(rho, estimate_geometric_rate(K, pi, vees[(l, th)]).rho_hat)

    cert = ErgodicityCertificate(
        epsilon_minor=float(eps),
        small_set=tuple(int(i) for i in np.flatnonzero(core)),
        nu_mass=float(nu_mass),
        lambda_drift=float(lam),
        b_drift=float(b),
        rho_hat=float(rho),
        n_steps_minor=int(n0),
        thetas=tuple(thetas),
        levels=tuple(levels),
        extended_states=tuple(extended),
    )
    # defensive: the reported inequality must hold entrywise on the grid
    ind = np.zeros(m)
    ind[list(cert.small_set)] = 1.0
    for (l, th), K in kernels.items():
        V = vees[(l, th)]
        gap = K @ V - (lam * V + b * ind)
        if np.max(gap) > 1e-12:
            x = int(np.argmax(gap))
            raise NumericalError(
                f"drift inequality fails at (theta={th}, l={l}, x={x}) by {np.max(gap):.3e}")
    return cert


def _v_weighted_measure_gap(mu: np.ndarray, xi: np.ndarray, W: np.ndarray) -> float:
    return float(np.sum(W * np.abs(mu - xi)))


def _v_weighted_kernel_gap(K1: np.ndarray, K2: np.ndarray, W: np.ndarray) -> float:
    row = np.abs(K1 - K2) @ W
    return float(np.max(row / W))


def fitted_log2_slope(levels, values) -> float | str:
    """Least-squares slope of log2(values) against the level index.

    Returns the string "exact" when the quantity is numerically zero at
    every level (no level dependence at all)."""
    values = np.asarray(values, dtype=float)
    if np.max(np.abs(values)) < 1e-14:
        return "exact"
    if np.min(values) <= 0.0:
        raise NumericalError("cannot fit a decay slope through zero or negative values")
    return float(np.polyfit(np.asarray(levels, dtype=float), np.log2(values), 1)[0])


@dataclass(frozen=True)
class RateDiagnostics:
    """Exactly evaluated level-perturbation norms with fitted decay slopes.

    quantities maps each diagnostic to its per-level values:

    - kernel_distance:     |||K_{theta,l} - K_{theta,inf}|||_{V_{theta,l}^r}
    - stationary_distance: ||pi_{theta,l} - pi_{theta,inf}||_{V_{theta,inf}^r}
    - mean_shift:          |pi_{theta,inf}(H_l - H_inf)|
    - smoothed_shift:      |K_{theta,inf}(H_l - H_{l-1})|_{V_{theta,l-1}^r}
    - derivative_shift:    |pi_{theta,inf}(dH_l/dtheta - dH_inf/dtheta)|

    Slopes are log2 decay rates per level; identically-zero quantities are
    reported as "exact".
    """

    levels: tuple[int, ...]
    theta: float
    r: float
    quantities: dict[str, np.ndarray]
    slopes: dict[str, float | str]


def rate_diagnostics(model: FiniteLevelModel, levels, theta: float,
                     r: float = 1.0) -> RateDiagnostics:
    """Measure the level hierarchy's perturbation norms and their decay.

    All quantities are exact finite sums/maxima over states; the slopes
    should reproduce -beta0 for quantities that depend on the level at all.
    """
    levels = [int(l) for l in levels]
    if len(levels) < 4:
        raise ParameterError(f"need at least 4 levels for a slope fit, got {len(levels)}")
    if not (0.0 < r <= 1.0):
        raise ParameterError(f"r must lie in (0, 1], got {r}")
    K_inf = kernel_matrix(model, math.inf, theta)
    pi_inf = target_density(model, math.inf, theta)
    V_inf = lyapunov_vector(model, math.inf, theta) ** r
    s_inf = level_statistic(model, math.inf)
    q = {k: [] for k in ("kernel_distance", "stationary_distance", "mean_shift",
                         "smoothed_shift", "derivative_shift")}
    for l in levels:
        V_l = lyapunov_vector(model, l, theta) ** r
        V_lm1 = lyapunov_vector(model, l - 1, theta) ** r
        s_l = level_statistic(model, l)
        s_lm1 = level_statistic(model, l - 1)
        q["kernel_distance"].append(
            _v_weighted_kernel_gap(kernel_matrix(model, l, theta), K_inf, V_l))
        q["stationary_distance"].append(
            _v_weighted_measure_gap(target_density(model, l, theta), pi_inf, V_inf))
        # H_l - H_inf = phi_l - phi_inf: the theta part cancels
        q["mean_shift"].append(abs(float(pi_inf @ (s_l - s_inf))))
        q["smoothed_shift"].append(float(np.max(np.abs(K_inf @ (s_l - s_lm1)) / V_lm1)))
        # dH/dtheta = -1 at every level: the gap is identically zero
        q["derivative_shift"].append(0.0)
    quantities = {k: np.asarray(v) for k, v in q.items()}
    slopes = {k: fitted_log2_slope(levels, v) for k, v in quantities.items()}
    return RateDiagnostics(levels=tuple(levels), theta=float(theta), r=float(r),
                           quantities=quantities, slopes=slopes)


@lru_cache(maxsize=4096)
def _poisson_for(model: FiniteLevelModel, l, theta: float) -> PoissonSolution:
    """Poisson solution for the update statistic H_l(theta, .) (cached)."""
    K = kernel_matrix(model, l, theta)
    pi = target_density(model, l, theta)
    H = level_statistic(model, l) - theta
    sol = poisson_solve(K, pi, H)
    sol.g_hat.setflags(write=False)
    sol.Kg_hat.setflags(write=False)
    return sol


@dataclass(frozen=True)
class LemmaDiagnostics:
    """Exactly evaluated Poisson-solution gap diagnostics.

    Per level: the V-norm gap of the Poisson solution across adjacent
    levels (solution_gap) and of its one-step smoothing (smoothed_gap);
    the theta-continuity gap at fixed level divided by
    |theta - theta'|**zeta (theta_gap, holder_ratio); the mean-field
    derivative gap across levels at (theta, theta') (derivative_gap) and
    at equal arguments (derivative_gap_equal, the purely level-driven part
    whose decay rate is clean; at theta != theta' the raw gap plateaus at
    the Holder term); the
    Lipschitz ratio of the Poisson solution in the state metric
    (lipschitz_ratio); and the coupled-expectation blocks of the variance
    formula at the per-level roots (block_*), with sqrt of the coupled
    second moment of the metric (coupled_d2_sqrt) and the root gap
    (root_gap) for comparison.
    """

    levels: tuple[int, ...]
    theta: float
    theta_prime: float
    zeta: float
    r: float
    quantities: dict[str, np.ndarray]
    slopes: dict[str, float | str]


def lemma_diagnostics(model: FiniteLevelModel, levels, theta: float, theta_prime: float,
                      zeta: float = 1.0, r: float = 1.0,
                      coupling: str = "crn") -> LemmaDiagnostics:
    """Evaluate the Poisson-gap and variance-block diagnostics per level."""
    levels = [int(l) for l in levels]
    if len(levels) < 4:
        raise ParameterError(f"need at least 4 levels for a slope fit, got {len(levels)}")
    if min(levels) < 1:
        raise ParameterError("levels must be >= 1 (gaps pair l with l-1)")
    D = metric_matrix(model)
    off = ~np.eye(model.m, dtype=bool)
    q = {k: [] for k in ("solution_gap", "smoothed_gap", "theta_gap", "holder_ratio",
                         "derivative_gap", "derivative_gap_equal", "lipschitz_ratio",
                         "block_fine", "block_coarse", "block_fine_smoothed",
                         "block_coarse_smoothed", "coupled_d2_sqrt", "root_gap")}
    for l in levels:
        V_l = lyapunov_vector(model, l, theta) ** r
        sol_l = _poisson_for(model, l, theta)
        sol_lm1 = _poisson_for(model, l - 1, theta)
        q["solution_gap"].append(float(np.max(np.abs(sol_l.g_hat - sol_lm1.g_hat) / V_l)))
        q["smoothed_gap"].append(float(np.max(np.abs(sol_l.Kg_hat - sol_lm1.Kg_hat) / V_l)))
        sol_prime = _poisson_for(model, l, theta_prime)
        tgap = float(np.max(np.abs(sol_l.g_hat - sol_prime.g_hat) / V_l))
        q["theta_gap"].append(tgap)
        dth = abs(theta - theta_prime)
        q["holder_ratio"].append(tgap / dth ** zeta if dth > 0.0 else 0.0)
        dh_l_at = mean_field_derivative(model, l, theta)
        q["derivative_gap"].append(abs(dh_l_at - mean_field_derivative(model, l - 1, theta_prime)))
        q["derivative_gap_equal"].append(abs(dh_l_at - mean_field_derivative(model, l - 1, theta)))
        gaps = np.abs(sol_l.g_hat[:, None] - sol_l.g_hat[None, :])
        q["lipschitz_ratio"].append(float(np.max(gaps[off] / D[off])))

        th_f = level_root(model, l)
        th_c = level_root(model, l - 1)
        sol_f = _poisson_for(model, l, th_f)
        sol_c = _poisson_for(model, l - 1, th_c)
        A, KA = sol_f.g_hat, sol_f.Kg_hat
        B, KB = sol_c.g_hat, sol_c.Kg_hat
        P = _coupled_stationary(model, l, th_f, th_c, coupling).reshape(model.m, model.m)
        cross = A @ P @ B
        cross_s = KA @ P @ KB
        q["block_fine"].append(abs(float(P.sum(axis=1) @ (A * A) - cross)))
        q["block_coarse"].append(abs(float(P.sum(axis=0) @ (B * B) - cross)))
        q["block_fine_smoothed"].append(abs(float(P.sum(axis=1) @ (KA * KA) - cross_s)))
        q["block_coarse_smoothed"].append(abs(float(P.sum(axis=0) @ (KB * KB) - cross_s)))
        q["coupled_d2_sqrt"].append(float(np.sqrt(np.sum(P * D * D))))
        q["root_gap"].append(abs(th_f - th_c))
    quantities = {k: np.asarray(v) for k, v in q.items()}
    slopes = {k: fitted_log2_slope(levels, quantities[k])
              for k in ("solution_gap", "smoothed_gap", "derivative_gap_equal",
                        "coupled_d2_sqrt", "root_gap")}
    return LemmaDiagnostics(levels=tuple(levels), theta=float(theta),
                            theta_prime=float(theta_prime), zeta=float(zeta), r=float(r),
                            quantities=quantities, slopes=slopes)
