"""Finite-state reference problem with a synthetic per-level solver bias.

States are a grid x in {0, ..., m-1} at positions u_x = x/(m-1) in [0, 1].
The level-l target is the exponential-family tilt

    pi_{theta,l}(x) propto exp(theta * phi_l(u_x)),
    phi_l = phi + delta_l**beta0 * c,     delta_l = 2**-l,

so the limit l = inf recovers the unbiased statistic phi.  The bias
amplitude delta_l**beta0 is injected with an exactly known rate, which is
what makes decay-rate assertions testable: every perturbation norm across
levels inherits the rate beta0 by construction.

The Markov kernel per (theta, l) is a random-walk Metropolis chain with
nearest-neighbour proposals, off-grid proposals rejected in place.  The
coupled kernel advances a fine chain at (theta, l) and a coarse chain at
(theta_bar, l-1) with shared proposal direction and shared acceptance
uniform (common random numbers); an independent product coupling is
available as a baseline.  Both couplings reproduce the single-level
kernels exactly as their coordinate marginals.

The update statistic is H_l(theta, x) = phi_l(u_x) - theta, so the mean
field h_l(theta) = pi_{theta,l}(phi_l) - theta has derivative
Var_{pi_{theta,l}}(phi_l) - 1, which the scaling |phi_l| <= 1 keeps
strictly negative: each level has a unique root.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import ParameterError, level_delta

__all__ = [
    "FiniteLevelModel",
    "build_model",
    "level_statistic",
    "drift_term",
    "target_density",
    "kernel_matrix",
    "coupled_kernel_matrix",
    "lyapunov_vector",
    "metric_matrix",
    "sample_step",
    "coupled_sample_step",
]

INF = math.inf

_PHI_CHOICES = ("sine", "zero")
# "shifted-cosine" breaks the quarter-period alignment between sin(2*pi*u)
# and cos(2*pi*u) under which several signed level-perturbation integrals
# cancel identically; use it when a diagnostic needs the generic decay rate.
_BIAS_CHOICES = ("cosine", "shifted-cosine", "zero")


@dataclass(frozen=True, eq=False)
class FiniteLevelModel:
    """Immutable model instance; arrays are read-only views."""

    m: int
    beta0: float
    lyap_exponent: float
    phi_choice: str
    bias_choice: str
    phi: np.ndarray   # base statistic phi(u_x), |phi| <= 1
    bias: np.ndarray  # bias shape c(u_x), |c| <= 1

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.m) / (self.m - 1)


def build_model(m: int = 32, beta0: float = 1.0, lyap_exponent: float = 0.5,
                phi_choice: str = "sine", bias_choice: str = "cosine") -> FiniteLevelModel:
    """Construct a validated model.

    m >= 3 keeps the nearest-neighbour proposal meaningful; beta0 > 0 is
    the synthetic bias rate; lyap_exponent in (0, 1) shapes the Lyapunov
    function pi**-lyap_exponent.
    """
    if not isinstance(m, int) or m < 3:
        raise ParameterError(f"m must be an integer >= 3, got {m!r}")
    if beta0 <= 0:
        raise ParameterError(f"beta0 must be positive, got {beta0}")
    if not (0.0 < lyap_exponent < 1.0):
        raise ParameterError(f"lyap_exponent must lie in (0, 1), got {lyap_exponent}")
    if phi_choice not in _PHI_CHOICES:
        raise ParameterError(f"phi_choice must be one of {_PHI_CHOICES}, got {phi_choice!r}")
    if bias_choice not in _BIAS_CHOICES:
        raise ParameterError(f"bias_choice must be one of {_BIAS_CHOICES}, got {bias_choice!r}")
    u = np.arange(m) / (m - 1)
    phi = 0.5 * np.sin(2 * np.pi * u) if phi_choice == "sine" else np.zeros(m)
    if bias_choice == "cosine":
        bias = 0.5 * np.cos(2 * np.pi * u)
    elif bias_choice == "shifted-cosine":
        bias = 0.5 * np.cos(2 * np.pi * u + 1.0)
    else:
        bias = np.zeros(m)
    # |phi_l| <= 1 for every level keeps Var(phi_l) < 1, hence dh_l/dtheta < 0.
    assert np.max(np.abs(phi)) <= 1.0 and np.max(np.abs(bias)) <= 1.0
    phi.setflags(write=False)
    bias.setflags(write=False)
    return FiniteLevelModel(m, float(beta0), float(lyap_exponent),
                            phi_choice, bias_choice, phi, bias)


def _check_level(l, minimum: int = 0) -> None:
    if l == INF:
        return
    if not isinstance(l, (int, np.integer)) or isinstance(l, bool) or l < minimum:
        raise ParameterError(f"level must be an integer >= {minimum} or math.inf, got {l!r}")


@lru_cache(maxsize=512)
def level_statistic(model: FiniteLevelModel, l) -> np.ndarray:
    """phi_l = phi + delta_l**beta0 * c; phi itself at l = inf."""
    _check_level(l)
    amp = level_delta(l) ** model.beta0
    out = model.phi + amp * model.bias
    out.setflags(write=False)
    return out


@lru_cache(maxsize=512)
def _step_diffs(model: FiniteLevelModel, l) -> tuple[np.ndarray, np.ndarray]:
    """Statistic increments for +1/-1 proposals, zero-padded at the walls.

    The padding value is never used: boundary proposals are masked to
    acceptance probability 0 before these arrays matter.
    """
    s = level_statistic(model, l)
    up = np.append(s[1:] - s[:-1], 0.0)
    dn = np.append(0.0, s[:-1] - s[1:])
    up.setflags(write=False)
    dn.setflags(write=False)
    return up, dn


def acceptance_vectors(model: FiniteLevelModel, l, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Metropolis acceptance probabilities for +1 and -1 proposals per state.

    min(1, exp(z)) is computed as exp(min(z, 0)), which cannot overflow.
    Off-grid proposals get probability 0 (rejected in place).
    """
    up, dn = _step_diffs(model, l)
    a_up = np.exp(np.minimum(theta * up, 0.0))
    a_dn = np.exp(np.minimum(theta * dn, 0.0))
    a_up[-1] = 0.0
    a_dn[0] = 0.0
    return a_up, a_dn


def drift_term(model: FiniteLevelModel, l, theta: float, x: int) -> float:
    """Update statistic H_l(theta, x) = phi_l(u_x) - theta."""
    s = level_statistic(model, l)
    return float(s[x] - theta)


def target_density(model: FiniteLevelModel, l, theta: float) -> np.ndarray:
    """Normalized pi_{theta,l}; exponentials are max-shifted before
    normalization so any finite theta is safe."""
    _check_level(l)
    z = theta * level_statistic(model, l)
    w = np.exp(z - np.max(z))
    return w / w.sum()


def kernel_matrix(model: FiniteLevelModel, l, theta: float) -> np.ndarray:
    """Row-stochastic random-walk Metropolis transition matrix.

    Proposals x -> x+-1 with probability 1/2 each; an off-grid proposal is
    rejected in place; rejected mass sits on the diagonal.  The matrix is
    reversible with respect to target_density(model, l, theta).
    """
    m = model.m
    a_up, a_dn = acceptance_vectors(model, l, theta)
    K = np.zeros((m, m))
    idx = np.arange(m)
    K[idx[:-1], idx[:-1] + 1] = 0.5 * a_up[:-1]
    K[idx[1:], idx[1:] - 1] = 0.5 * a_dn[1:]
    K[idx, idx] = 1.0 - 0.5 * a_up - 0.5 * a_dn
    return K


def coupled_kernel_matrix(model: FiniteLevelModel, l, theta: float, theta_bar: float,
                          coupling: str = "crn") -> np.ndarray:
    """Row-stochastic m**2 x m**2 kernel on pairs (fine at (theta, l),
    coarse at (theta_bar, l-1)); pair (x, xbar) has flat index x*m + xbar.

    "crn" shares one proposal direction and one acceptance uniform between
    the chains: per direction the joint move splits into at most four
    outcomes (both accept, fine only, coarse only, neither) with
    probabilities min(af, ac), af - min, ac - min, 1 - max.  "independent"
    is the product of the single-level kernels.  Both reproduce the
    single-level kernels exactly as coordinate marginals.
    """
    _check_level(l, minimum=1)
    if coupling == "independent":
        return np.kron(kernel_matrix(model, l, theta),
                       kernel_matrix(model, l - 1, theta_bar))
    if coupling != "crn":
        raise ParameterError(f"coupling must be 'crn' or 'independent', got {coupling!r}")
    m = model.m
    af_up, af_dn = acceptance_vectors(model, l, theta)
    ac_up, ac_dn = acceptance_vectors(model, l - 1, theta_bar)
    x = np.repeat(np.arange(m), m)
    y = np.tile(np.arange(m), m)
    pair = np.arange(m * m)
    K = np.zeros((m * m, m * m))
    for d, af, ac in ((1, af_up[x], ac_up[y]), (-1, af_dn[x], ac_dn[y])):
        xn = np.clip(x + d, 0, m - 1)  # clip targets are dead when acceptance is 0
        yn = np.clip(y + d, 0, m - 1)
        mn = np.minimum(af, ac)
        np.add.at(K, (pair, xn * m + yn), 0.5 * mn)
        np.add.at(K, (pair, xn * m + y), 0.5 * (af - mn))
        np.add.at(K, (pair, x * m + yn), 0.5 * (ac - mn))
        np.add.at(K, (pair, x * m + y), 0.5 * (1.0 - np.maximum(af, ac)))
    return K


def lyapunov_vector(model: FiniteLevelModel, l, theta: float) -> np.ndarray:
    """V_{theta,l} = (pi / max pi)**-lyap_exponent; every entry >= 1 with
    the minimum 1 attained at the mode."""
    pi = target_density(model, l, theta)
    return (pi / pi.max()) ** (-model.lyap_exponent)


def metric_matrix(model: FiniteLevelModel) -> np.ndarray:
    """State-pair metric D(x, y) = |u_x - u_y|."""
    u = model.positions
    return np.abs(u[:, None] - u[None, :])


def sample_step(model: FiniteLevelModel, l, theta: float, x: int,
                rng: np.random.Generator) -> int:
    """One Metropolis transition from x; consumes exactly two uniforms
    (direction, acceptance) so the stream layout is state-independent."""
    u = rng.random(2)
    a_up, a_dn = acceptance_vectors(model, l, theta)
    d = 1 if u[0] < 0.5 else -1
    accept = u[1] < (a_up[x] if d == 1 else a_dn[x])
    return int(x + d) if accept else int(x)


def coupled_sample_step(model: FiniteLevelModel, l, theta: float, theta_bar: float,
                        x: int, x_bar: int, rng: np.random.Generator,
                        coupling: str = "crn") -> tuple[int, int]:
    """One coupled transition of the (fine, coarse) pair.

    CRN consumes one direction uniform and one acceptance uniform shared
    by both chains; the independent coupling consumes two of each, fine
    first.
    """
    _check_level(l, minimum=1)
    af_up, af_dn = acceptance_vectors(model, l, theta)
    ac_up, ac_dn = acceptance_vectors(model, l - 1, theta_bar)
    if coupling == "crn":
        u = rng.random(2)
        d = 1 if u[0] < 0.5 else -1
        af = af_up[x] if d == 1 else af_dn[x]
        ac = ac_up[x_bar] if d == 1 else ac_dn[x_bar]
        xn = x + d if u[1] < af else x
        yn = x_bar + d if u[1] < ac else x_bar
        return int(xn), int(yn)
    if coupling != "independent":
        raise ParameterError(f"coupling must be 'crn' or 'independent', got {coupling!r}")
    u = rng.random(4)
    df = 1 if u[0] < 0.5 else -1
    xn = x + df if u[1] < (af_up[x] if df == 1 else af_dn[x]) else x
    dc = 1 if u[2] < 0.5 else -1
    yn = x_bar + dc if u[3] < (ac_up[x_bar] if dc == 1 else ac_dn[x_bar]) else x_bar
    return int(xn), int(yn)
