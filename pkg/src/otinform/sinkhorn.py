"""Log-domain Sinkhorn solver, plan recovery and Sinkhorn divergence."""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from otinform.measure import DiscreteMeasure, GroundCost, cost_matrix

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 10_000
PLAN_MARGINAL_ATOL = 1e-6
PLAN_MASS_ATOL = 1e-9


class ConvergenceWarning(UserWarning):
    pass


class StalePotentialsError(ValueError):
    """Potentials whose induced plan violates the marginals beyond tolerance."""


def logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    """Max-subtracted log-sum-exp; rows that are entirely -inf give -inf."""
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    return np.squeeze(out, axis=axis)


def _safe_log(w: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(w)


@dataclass(frozen=True, eq=False)
class Potentials:
    """Dual pair ``(f, g)``; the plan density w.r.t. ``mu x nu`` is ``exp((f + g - C) / eps)``."""

    f: np.ndarray
    g: np.ndarray
    epsilon: float
    converged: bool
    iterations: int
    tol: float = DEFAULT_TOL
    marginal_error: float = math.nan
    dual_history: np.ndarray | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True, eq=False)
class TransportPlan:
    gamma: np.ndarray
    mu_ref: DiscreteMeasure
    nu_ref: DiscreteMeasure

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=np.float64)
        if gamma.shape != (self.mu_ref.n, self.nu_ref.n):
            raise ValueError(f"plan shape {gamma.shape} does not match marginals "
                             f"({self.mu_ref.n}, {self.nu_ref.n})")
        if np.any(gamma < 0) or not np.all(np.isfinite(gamma)):
            raise ValueError("plan entries must be finite and nonnegative")
        if abs(gamma.sum() - 1.0) > PLAN_MASS_ATOL:
            raise ValueError(f"plan total mass {gamma.sum()!r} differs from 1")
        err = marginal_violation(gamma, self.mu_ref.weights, self.nu_ref.weights)
        if err > PLAN_MARGINAL_ATOL:
            raise ValueError(f"plan marginal violation {err:.3e} exceeds {PLAN_MARGINAL_ATOL}")
        object.__setattr__(self, "gamma", gamma)

    def cost(self, C: np.ndarray) -> float:
        return float(np.sum(self.gamma * C))

    def kl_to_product(self) -> float:
        return kl_divergence(self.gamma, np.outer(self.mu_ref.weights, self.nu_ref.weights))

    def entropy(self) -> float:
        return entropy(self.gamma)

    def to_csv(self, path, epsilon: float, value: float, **extra) -> None:
        """Write nonzero masses as ``i,j,mass`` and a JSON header next to it."""
        write_plan_csv(path, self.gamma, {"epsilon": float(epsilon), "value": float(value), **extra})

    @staticmethod
    def read_csv(path) -> tuple[np.ndarray, dict]:
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text())
        gamma = np.zeros((header["n"], header["m"]))
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.size:
            gamma[data[:, 0].astype(int), data[:, 1].astype(int)] = data[:, 2]
        return gamma, header


def write_plan_csv(path, gamma: np.ndarray, header: dict) -> None:
    """Sparse ``i,j,mass`` dump of entries above 1e-12 plus a ``.json`` sidecar.

    Unlike ``TransportPlan.to_csv`` this accepts plans that fail the marginal
    check, so results of unconverged solves can still be inspected.
    """
    path = Path(path)
    ii, jj = np.nonzero(gamma > 1e-12)
    with open(path, "w") as fh:
        fh.write("i,j,mass\n")
        for i, j in zip(ii, jj):
            fh.write(f"{i},{j},{float(gamma[i, j])!r}\n")
    meta = {"n": int(gamma.shape[0]), "m": int(gamma.shape[1]), **header}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")


def marginal_violation(gamma, mu_weights, nu_weights) -> float:
    return float(max(np.max(np.abs(gamma.sum(axis=1) - mu_weights)),
                     np.max(np.abs(gamma.sum(axis=0) - nu_weights))))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """``sum p log(p / q)`` with ``0 log 0 = 0``; ``inf`` if ``p`` charges a null cell of ``q``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    if np.any(q[mask] <= 0):
        return math.inf
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    mask = p > 0
    return float(-np.sum(p[mask] * np.log(p[mask])))


def _check_problem(mu: DiscreteMeasure, nu: DiscreteMeasure, C: np.ndarray) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.shape != (mu.n, nu.n):
        raise ValueError(f"cost matrix shape {C.shape} does not match ({mu.n}, {nu.n})")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix must be finite")
    return C


def _dual_value(f, g, log_mu, log_nu, C, eps) -> float:
    mass = np.exp(logsumexp(logsumexp(log_mu[:, None] + log_nu[None, :]
                                      + (f[:, None] + g[None, :] - C) / eps, axis=1), axis=0))
    mu, nu = np.exp(log_mu), np.exp(log_nu)
    return float(mu @ f + nu @ g + eps * (1.0 - mass))


def sinkhorn_potentials(mu: DiscreteMeasure, nu: DiscreteMeasure, C, epsilon: float,
                        tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                        eps_scaling: bool = False, init: Potentials | None = None,
                        record_dual: bool = False) -> Potentials:
    """Solve entropic OT in the dual by alternating log-domain Sinkhorn updates.

    Stops once the L-infinity marginal violation of the induced plan is at most
    ``tol``. With ``eps_scaling`` the regularization starts at ``max(C)`` and is
    halved down to ``epsilon``, warm-starting each stage. ``g`` is returned with
    ``<g, nu> = 0``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not tol > 0:
        raise ValueError("tol must be positive")
    C = _check_problem(mu, nu, C)
    log_mu, log_nu = _safe_log(mu.weights), _safe_log(nu.weights)

    f = np.zeros(mu.n) if init is None else np.array(init.f, dtype=np.float64)
    g = np.zeros(nu.n) if init is None else np.array(init.g, dtype=np.float64)

    schedule = [epsilon]
    if eps_scaling:
        e = float(C.max())
        stages = []
        while e > epsilon:
            stages.append(e)
            e /= 2.0
        schedule = stages + [epsilon]

    history = [] if record_dual else None
    iterations = 0
    err = math.inf
    for stage, eps in enumerate(schedule):
        final = stage == len(schedule) - 1
        stage_tol = tol if final else max(tol, 1e-3 * eps)
        # row log-marginal of the plan induced by (f, g), up to the f term
        lse_rows = logsumexp(log_nu[None, :] + (g[None, :] - C) / eps, axis=1)
        while iterations < max_iter:
            f = -eps * lse_rows
            g = -eps * logsumexp(log_mu[:, None] + (f[:, None] - C) / eps, axis=0)
            iterations += 1
            lse_rows = logsumexp(log_nu[None, :] + (g[None, :] - C) / eps, axis=1)
            row = np.exp(log_mu + f / eps + lse_rows)
            err = float(np.max(np.abs(row - mu.weights)))
            if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g)) and math.isfinite(err)):
                raise FloatingPointError(f"non-finite potentials at iteration {iterations}")
            if history is not None and final:
                history.append(_dual_value(f, g, log_mu, log_nu, C, eps))
            if err <= stage_tol:
                break
        if iterations >= max_iter:
            break

    shift = float(nu.weights @ g)
    f, g = f + shift, g - shift
    converged = err <= tol
    return Potentials(f, g, float(epsilon), converged, iterations, tol, err,
                      None if history is None else np.array(history))


def plan_matrix(pot: Potentials, mu: DiscreteMeasure, nu: DiscreteMeasure, C) -> np.ndarray:
    """Plan induced by the potentials, with no feasibility check."""
    C = _check_problem(mu, nu, C)
    log_gamma = (_safe_log(mu.weights)[:, None] + _safe_log(nu.weights)[None, :]
                 + (pot.f[:, None] + pot.g[None, :] - C) / pot.epsilon)
    return np.exp(log_gamma)


def recover_plan(pot: Potentials, mu: DiscreteMeasure, nu: DiscreteMeasure, C) -> TransportPlan:
    gamma = plan_matrix(pot, mu, nu, C)
    err = marginal_violation(gamma, mu.weights, nu.weights)
    if err > 10 * pot.tol:
        raise StalePotentialsError(
            f"recovered plan violates marginals by {err:.3e} (> 10 x tol = {10 * pot.tol:.1e})")
    return TransportPlan(gamma, mu, nu)


def entropic_ot_value(pot: Potentials, mu: DiscreteMeasure, nu: DiscreteMeasure, C) -> float:
    """Dual objective ``<f, mu> + <g, nu> + eps * (1 - mass of the induced plan)``."""
    C = _check_problem(mu, nu, C)
    if pot.f.shape != (mu.n,) or pot.g.shape != (nu.n,):
        raise ValueError("potentials do not match the measures")
    return _dual_value(pot.f, pot.g, _safe_log(mu.weights), _safe_log(nu.weights), C, pot.epsilon)


def primal_value(gamma: np.ndarray, mu: DiscreteMeasure, nu: DiscreteMeasure, C, epsilon: float) -> float:
    """``<C, gamma> + eps * KL(gamma || mu x nu)``."""
    return float(np.sum(gamma * C)) + epsilon * kl_divergence(
        gamma, np.outer(mu.weights, nu.weights))


def c_eps_transform(g, C_row, nu_weights, epsilon: float) -> float:
    """Soft minimum ``-eps log sum_j nu_j exp((g_j - C_row_j) / eps)``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    g = np.asarray(g, dtype=np.float64)
    a = _safe_log(np.asarray(nu_weights, dtype=np.float64)) + (g - np.asarray(C_row)) / epsilon
    return float(-epsilon * logsumexp(a, axis=0))


def sinkhorn_divergence(mu: DiscreteMeasure, nu: DiscreteMeasure, cost: GroundCost | str,
                        epsilon: float, tol: float = DEFAULT_TOL,
                        max_iter: int = DEFAULT_MAX_ITER, eps_scaling: bool = False) -> float:
    """``W(mu, nu) - W(mu, mu) / 2 - W(nu, nu) / 2``; warns if any solve did not converge."""
    values = []
    unconverged = []
    for a, b, name in ((mu, nu, "mu,nu"), (mu, mu, "mu,mu"), (nu, nu, "nu,nu")):
        C = cost_matrix(cost, a.points, b.points)
        pot = sinkhorn_potentials(a, b, C, epsilon, tol, max_iter, eps_scaling)
        if not pot.converged:
            unconverged.append(name)
        values.append(entropic_ot_value(pot, a, b, C))
    if unconverged:
        warnings.warn(f"Sinkhorn did not converge for W({'), W('.join(unconverged)})",
                      ConvergenceWarning, stacklevel=2)
    return values[0] - 0.5 * values[1] - 0.5 * values[2]


def brute_force_assignment(mu: DiscreteMeasure, nu: DiscreteMeasure, C) -> tuple[float, tuple[int, ...]]:
    """Exact OT between two uniform measures of equal size ``n <= 8``.

    Enumerates permutations in lexicographic order and keeps the first minimizer.
    """
    C = _check_problem(mu, nu, C)
    n = mu.n
    if nu.n != n or n > 8:
        raise ValueError(f"brute force needs n = m <= 8, got n={n}, m={nu.n}")
    uniform = np.full(n, 1.0 / n)
    if not (np.allclose(mu.weights, uniform, rtol=0, atol=1e-12)
            and np.allclose(nu.weights, uniform, rtol=0, atol=1e-12)):
        raise ValueError("brute force needs uniform marginals")
    rows = np.arange(n)
    best, best_perm = math.inf, None
    for perm in itertools.permutations(range(n)):
        value = C[rows, perm].sum()
        if value < best:
            best, best_perm = value, perm
    return float(best / n), best_perm


def brute_force_ot(mu: DiscreteMeasure, nu: DiscreteMeasure, C) -> float:
    return brute_force_assignment(mu, nu, C)[0]
