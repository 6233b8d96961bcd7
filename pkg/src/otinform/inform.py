"""Informative regularization of a transport plan via a DC scheme.

The objective over couplings ``gamma`` of ``(zeta, nu)`` is

    F(gamma) = <C, gamma> + eps * KL(gamma || zeta x nu)
               - lam * KL(kappa || zeta1 x nu),

where ``kappa`` is the plan marginalized onto (latent group, data atom). The
concave part is linearized at the current plan, which turns each step into a
plain entropic OT problem with the cost ``C - lam * log(kappa / (zeta1 x nu))``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from otinform.measure import DiscreteMeasure, cost_matrix, diagonal_mixture_dataset, unit_square_grid
from otinform.sinkhorn import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    ConvergenceWarning,
    TransportPlan,
    entropy,
    kl_divergence,
    plan_matrix,
    sinkhorn_potentials,
)

RATIO_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class MarginalPlan:
    kappa: np.ndarray
    group_of: np.ndarray

    @property
    def n_groups(self) -> int:
        return self.kappa.shape[0]


def bucket_groups(points, n_groups: int, axis: int = 0, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Equal-width bucketing of one coordinate into ``n_groups`` groups."""
    x = np.asarray(points, dtype=np.float64)[:, axis]
    idx = np.floor((x - lo) / (hi - lo) * n_groups).astype(int)
    return np.clip(idx, 0, n_groups - 1)


def group_masses(weights, group_of, n_groups: int | None = None) -> np.ndarray:
    group_of = np.asarray(group_of)
    n_groups = int(group_of.max()) + 1 if n_groups is None else n_groups
    return np.bincount(group_of, weights=weights, minlength=n_groups).astype(np.float64)


def marginalize_plan(plan: TransportPlan | np.ndarray, group_of, n_groups: int | None = None) -> MarginalPlan:
    """Sum plan rows within each latent group; ``group_of`` is 0-based."""
    gamma = plan.gamma if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    group_of = np.asarray(group_of, dtype=np.intp)
    if group_of.shape != (gamma.shape[0],):
        raise ValueError(f"group_of must map all {gamma.shape[0]} source atoms, got shape {group_of.shape}")
    if n_groups is None:
        n_groups = int(group_of.max()) + 1
    if group_of.min() < 0 or group_of.max() >= n_groups:
        raise ValueError(f"group index out of range [0, {n_groups})")
    kappa = np.zeros((n_groups, gamma.shape[1]))
    np.add.at(kappa, group_of, gamma)
    return MarginalPlan(kappa, group_of)


def marginal_kl(marg: MarginalPlan, zeta1_masses, nu_weights) -> float:
    """``KL(kappa || zeta1 x nu)``; ``inf`` when ``kappa`` charges a null reference cell."""
    ref = np.outer(np.asarray(zeta1_masses, dtype=np.float64), np.asarray(nu_weights, dtype=np.float64))
    if ref.shape != marg.kappa.shape:
        raise ValueError(f"reference shape {ref.shape} does not match kappa {marg.kappa.shape}")
    return kl_divergence(marg.kappa, ref)


def plan_entropy(marg: MarginalPlan) -> float:
    return entropy(marg.kappa)


class DCStep(NamedTuple):
    outer_iter: int
    objective: float
    marginal_kl: float
    entropy: float
    inner_converged: bool
    inner_iterations: int


def informative_objective(gamma, C, zeta: DiscreteMeasure, nu: DiscreteMeasure, group_of,
                          epsilon: float, lam: float) -> tuple[float, float, float]:
    """Return ``(F(gamma), KL(kappa || zeta1 x nu), H(kappa))``."""
    n_groups = int(np.max(group_of)) + 1
    marg = marginalize_plan(gamma, group_of, n_groups)
    zeta1 = group_masses(zeta.weights, group_of, n_groups)
    mkl = marginal_kl(marg, zeta1, nu.weights)
    value = (float(np.sum(gamma * C))
             + epsilon * kl_divergence(gamma, np.outer(zeta.weights, nu.weights))
             - lam * mkl)
    return value, mkl, plan_entropy(marg)


def dc_informative_plan(zeta: DiscreteMeasure, nu: DiscreteMeasure, C, group_of,
                        epsilon: float, lam: float, outer_iters: int = 50, tol: float = 1e-10,
                        sinkhorn_tol: float = DEFAULT_TOL,
                        sinkhorn_max_iter: int = DEFAULT_MAX_ITER) -> tuple[TransportPlan, list[DCStep]]:
    """Minimize the informative objective by successive Sinkhorn solves on perturbed costs.

    The trace starts with the unregularized (``lam = 0``) plan at ``outer_iter`` 0
    and stops after ``outer_iters`` steps or once the objective moves by at most
    ``tol``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if lam >= epsilon:
        warnings.warn(f"lambda={lam} >= epsilon={epsilon}: the concave part may dominate",
                      RuntimeWarning, stacklevel=2)
    C = np.asarray(C, dtype=np.float64)
    group_of = np.asarray(group_of, dtype=np.intp)
    n_groups = int(group_of.max()) + 1
    ref = np.outer(group_masses(zeta.weights, group_of, n_groups), nu.weights)

    pot = sinkhorn_potentials(zeta, nu, C, epsilon, sinkhorn_tol, sinkhorn_max_iter)
    gamma = plan_matrix(pot, zeta, nu, C)
    value, mkl, ent = informative_objective(gamma, C, zeta, nu, group_of, epsilon, lam)
    trace = [DCStep(0, value, mkl, ent, pot.converged, pot.iterations)]

    if lam > 0:
        for it in range(1, outer_iters + 1):
            kappa = marginalize_plan(gamma, group_of, n_groups).kappa
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.maximum(np.where(ref > 0, kappa / ref, 0.0), RATIO_FLOOR)
            C_pert = C - lam * np.log(ratio)[group_of]
            pot = sinkhorn_potentials(zeta, nu, C_pert, epsilon, sinkhorn_tol,
                                      sinkhorn_max_iter, init=pot)
            gamma = plan_matrix(pot, zeta, nu, C_pert)
            value, mkl, ent = informative_objective(gamma, C, zeta, nu, group_of, epsilon, lam)
            trace.append(DCStep(it, value, mkl, ent, pot.converged, pot.iterations))
            if abs(trace[-1].objective - trace[-2].objective) <= tol:
                break

    if not all(step.inner_converged for step in trace):
        warnings.warn("inner Sinkhorn solve did not converge in at least one DC step",
                      ConvergenceWarning, stacklevel=2)
    return TransportPlan(gamma, zeta, nu), trace


def figure_setup(grid: int = 32, n_data: int = 256, modes: int = 3, sigma: float = 0.05,
                 seed: int = 0):
    """Uniform grid on the unit square against a diagonal Gaussian mixture.

    Returns ``(zeta, nu, C, group_of)`` with squared Euclidean cost and groups
    given by the first latent coordinate.
    """
    zeta = unit_square_grid(grid)
    nu = diagonal_mixture_dataset(n_data, modes, sigma, seed)
    C = cost_matrix("sql2", zeta.points, nu.points)
    return zeta, nu, C, bucket_groups(zeta.points, grid)

