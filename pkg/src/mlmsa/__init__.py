"""Multilevel Markovian stochastic approximation on finite-state models.

The package solves stochastic root-finding problems h_l(theta) = 0 where
h_l is the mean field of a level-indexed family of finite-state targets,
using Robbins-Monro iterations driven by Metropolis kernels.  It provides

- exact linear-algebra oracles (stationary laws, Poisson-equation solves,
  the asymptotic variance of coupled level increments with its term
  breakdown, ergodicity certificates, decay-rate diagnostics),
- simulation engines for single-level, reprojected, and coupled
  level-increment stochastic approximation,
- a multilevel driver (level schedules from a target precision, the
  collapsing-sum estimator, cost accounting), and
- a deterministic command-line front end.
"""

from . import core, model, exact, engine, multilevel

__version__ = "0.1.0"

__all__ = ["core", "model", "exact", "engine", "multilevel", "__version__"]
