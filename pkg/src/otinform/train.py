"""Adversarial training of a generator against minibatch semi-dual OT losses.

Each generator iteration runs ``n_d`` Adam ascent steps on the semi-dual
objectives of ``W(G#zeta, nu)`` (critic ``D2``) and ``W(G#zeta, G#zeta)``
(critic ``D4``), then expresses the implicit plans on a fresh minibatch and
takes one simultaneous Adam step for ``Q`` and ``G`` against them.
"""

from __future__ import annotations

import csv
import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from otinform.measure import DiscreteMeasure, GroundCost, LatentSpec, cost_matrix, sample_latent
from otinform.nn import AdamState, Mlp, Tensor, adam_step, as_tensor, pairwise_cost, value_and_grad

Q_CLAMP = 30.0


class LossKind(str, enum.Enum):
    SMOOTHED_OT = "smoothed_ot"
    SINKHORN = "sinkhorn"
    INFO_SINKHORN = "info_sinkhorn"


class TrainingDiverged(FloatingPointError):
    """Raised when an objective turns non-finite; carries the last finite networks."""

    def __init__(self, iteration: int, objective: str, last_good: "Networks", trace: np.ndarray):
        super().__init__(f"{objective} objective became non-finite at generator iteration {iteration}")
        self.iteration = iteration
        self.objective = objective
        self.last_good = last_good
        self.trace = trace


@dataclass(frozen=True)
class TrainConfig:
    epsilon: float = 1.5
    lam: float = 1.0
    n_d: int = 5
    batch: int = 256
    generator_iters: int = 5000
    cost: GroundCost = GroundCost.L1
    latent: LatentSpec = field(default_factory=lambda: LatentSpec(9, 0, 23))
    loss_kind: LossKind = LossKind.INFO_SINKHORN
    width: int = 64
    depth: int = 3
    lr_d: float = 2e-4
    lr_g: float = 2e-4
    lr_q: float = 2e-4
    betas_d: tuple[float, float] = (0.0, 0.9)
    betas_g: tuple[float, float] = (0.0, 0.9)
    betas_q: tuple[float, float] = (0.0, 0.9)
    weight_decay_q: float = 0.0
    shared_trunk: bool = False
    g_output: str = "identity"
    batch_norm: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cost", GroundCost.parse(self.cost))
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        if isinstance(self.latent, dict):
            object.__setattr__(self, "latent", LatentSpec(**self.latent))
        object.__setattr__(self, "betas_d", tuple(self.betas_d))
        object.__setattr__(self, "betas_g", tuple(self.betas_g))
        object.__setattr__(self, "betas_q", tuple(self.betas_q))
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.n_d < 1:
            raise ValueError("n_d must be >= 1")
        if self.batch < 2:
            raise ValueError("batch must be >= 2")
        if self.generator_iters < 0:
            raise ValueError("generator_iters must be >= 0")
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")
        if self.batch_norm:
            raise ValueError("batch normalization is not supported by the dense engine")
        if self.shared_trunk and self.depth < 2:
            raise ValueError("a shared trunk needs depth >= 2")
        for betas in (self.betas_d, self.betas_g, self.betas_q):
            if len(betas) != 2 or not all(0.0 <= b < 1.0 for b in betas):
                raise ValueError(f"Adam betas must be two values in [0, 1), got {betas}")

    @property
    def effective_lam(self) -> float:
        return self.lam if self.loss_kind is LossKind.INFO_SINKHORN else 0.0

    @property
    def uses_q(self) -> bool:
        return self.loss_kind is LossKind.INFO_SINKHORN and self.latent.info_dim > 0

    @property
    def uses_d4(self) -> bool:
        return self.loss_kind is not LossKind.SMOOTHED_OT


class Critic:
    """Network on data space, optionally sitting on a trunk shared with other critics."""

    def __init__(self, head: Mlp, trunk: Mlp | None = None):
        self.head = head
        self.trunk = trunk
        self.n_trunk = 0 if trunk is None else trunk.n_params

    @property
    def n_params(self) -> int:
        return self.n_trunk + self.head.n_params

    @property
    def out_dim(self) -> int:
        return self.head.out_dim

    def get_params(self) -> np.ndarray:
        if self.trunk is None:
            return self.head.params.copy()
        return np.concatenate([self.trunk.params, self.head.params])

    def set_params(self, theta: np.ndarray) -> None:
        if self.trunk is not None:
            self.trunk.params = theta[: self.n_trunk].copy()
        self.head.params = theta[self.n_trunk:].copy()

    def __call__(self, X, params=None):
        if params is None:
            h = X if self.trunk is None else self.trunk.forward(X)
            return self.head.forward(h)
        if self.trunk is None:
            return self.head(X, params)
        params = as_tensor(params)
        return self.head(self.trunk(X, params[: self.n_trunk]), params[self.n_trunk:])


class QFunction:
    """Dot-product rule ``Q(z1, y) = z1 . D_Q(y)`` on the informative latent block."""

    def __init__(self, net: Critic, info_dim: int):
        if net.out_dim != info_dim:
            raise ValueError(f"D_Q outputs {net.out_dim} values, informative block has {info_dim}")
        self.net = net
        self.info_dim = info_dim

    def matrix(self, z, y, params=None):
        """``B_z x B_y`` matrix of ``Q(z1_i, y_j)``."""
        z1 = np.asarray(z)[:, : self.info_dim]
        dq = self.net(y, params)
        if isinstance(dq, Tensor):
            return as_tensor(z1) @ dq.T
        return z1 @ dq.T


class Networks(NamedTuple):
    G: Mlp
    D2: Critic
    D4: Critic
    Q: QFunction | None
    trunk: Mlp | None

    def copy(self) -> "Networks":
        trunk = None if self.trunk is None else self.trunk.copy()

        def dup(c: Critic) -> Critic:
            return Critic(c.head.copy(), trunk)
        q = None if self.Q is None else QFunction(dup(self.Q.net), self.Q.info_dim)
        return Networks(self.G.copy(), dup(self.D2), dup(self.D4), q, trunk)


def init_networks(config: TrainConfig, data_dim: int = 2) -> Networks:
    """Seed-deterministic networks; each gets its own child seed of ``config.seed``."""
    seeds = np.random.SeedSequence(config.seed).spawn(6)
    w, depth = config.width, config.depth
    latent = config.latent
    G = Mlp([latent.dim] + [w] * depth + [data_dim], config.g_output, seeds[1])
    trunk = None
    head_in = data_dim
    head_hidden = depth
    if config.shared_trunk:
        trunk = Mlp([data_dim] + [w] * (depth - 1), "leaky_relu", seeds[5])
        head_in, head_hidden = w, 1
    D2 = Critic(Mlp([head_in] + [w] * head_hidden + [1], "identity", seeds[2]), trunk)
    D4 = Critic(Mlp([head_in] + [w] * head_hidden + [1], "identity", seeds[3]), trunk)
    Q = None
    if config.uses_q:
        DQ = Critic(Mlp([head_in] + [w] * head_hidden + [latent.info_dim], "identity", seeds[4]), trunk)
        Q = QFunction(DQ, latent.info_dim)
    return Networks(G, D2, D4, Q, trunk)


def _log_weights(expo: np.ndarray) -> np.ndarray:
    """Row-normalized log-weights ``expo - lse_row(expo) + log B`` (row means of exp are 1)."""
    amax = expo.max(axis=1, keepdims=True)
    lse = np.log(np.exp(expo - amax).sum(axis=1, keepdims=True)) + amax
    return expo - lse + math.log(expo.shape[1])


def _semi_dual(d: Tensor, shift: np.ndarray, epsilon: float) -> Tensor:
    """``mean_i T_i + mean_j d_j + eps`` with ``T_i = -eps log mean_j exp((d_j + shift_ij) / eps)``."""
    B = shift.shape[1]
    expo = (d * (1.0 / epsilon)).reshape(1, -1) + shift * (1.0 / epsilon)
    T = (expo.logsumexp(axis=1) - math.log(B)) * (-epsilon)
    return T.mean() + d.mean() + epsilon


def d2_objective(z, y, G: Mlp, D2: Critic, Q: QFunction | None, epsilon: float, lam: float,
                 cost: GroundCost | str = GroundCost.L1, params=None) -> Tensor:
    """Minibatch semi-dual of the Q-perturbed ``W_eps(G#zeta, nu)`` (to maximize).

    ``params`` replaces the parameters of ``D2`` (pass a ``Tensor`` to differentiate).
    """
    shift = -cost_matrix(cost, G.forward(z), y)
    if lam and Q is not None:
        shift += lam * Q.matrix(z, y)
    d = as_tensor(D2(y, params)).reshape(-1)
    return _semi_dual(d, shift, epsilon)


def d4_objective(zp, zpp, G: Mlp, D4: Critic, epsilon: float,
                 cost: GroundCost | str = GroundCost.L1, params=None) -> Tensor:
    """Minibatch semi-dual of ``W_eps(G#zeta, G#zeta)``; the transform runs over ``zpp``."""
    xpp = G.forward(zpp)
    shift = -cost_matrix(cost, G.forward(zp), xpp)
    d = as_tensor(D4(xpp, params)).reshape(-1)
    return _semi_dual(d, shift, epsilon)


def gamma_weights(z, y, G: Mlp, D2: Critic, Q: QFunction | None, epsilon: float, lam: float,
                  cost: GroundCost | str = GroundCost.L1) -> np.ndarray:
    """Density of the implicit latent/data plan w.r.t. ``zeta x nu`` on minibatch pairs."""
    x = G.forward(z)
    expo = D2(y).reshape(1, -1) - cost_matrix(cost, x, y)
    if lam and Q is not None:
        expo = expo + lam * Q.matrix(z, y)
    return np.exp(_log_weights(expo / epsilon))


def eta_weights(zp, zpp, G: Mlp, D4: Critic, epsilon: float,
                cost: GroundCost | str = GroundCost.L1) -> np.ndarray:
    xp, xpp = G.forward(zp), G.forward(zpp)
    expo = D4(xpp).reshape(1, -1) - cost_matrix(cost, xp, xpp)
    return np.exp(_log_weights(expo / epsilon))


def q_objective(z, y, w: np.ndarray, Q: QFunction, weight_decay: float = 0.0, params=None) -> Tensor:
    """``-mean(w * Q) + mean(exp(Q)) + weight_decay * |theta_Q|^2`` over all minibatch pairs (to minimize)."""
    theta = Q.net.get_params() if params is None else params
    qm = as_tensor(Q.matrix(z, y, params))
    if np.any(qm.value > Q_CLAMP):
        warnings.warn(f"Q values clamped to {Q_CLAMP}", RuntimeWarning, stacklevel=2)
        qm = qm.clip_max(Q_CLAMP)
    loss = -(qm * w).mean() + qm.exp().mean()
    if weight_decay:
        loss = loss + as_tensor(theta).square().sum() * weight_decay
    return loss


def g_objective(z, y, zp, zpp, w_gamma: np.ndarray, w_eta: np.ndarray | None, G: Mlp,
                cost: GroundCost | str = GroundCost.L1, params=None) -> Tensor:
    """Weighted transport cost minus half the weighted self-transport cost (to minimize).

    The weights are constants here. ``w_eta=None`` drops the debiasing term.
    """
    params = G.params if params is None else params
    theta = as_tensor(params)
    B = len(z)
    if w_eta is None:
        x = G(z, theta)
        return (pairwise_cost(cost, x, y) * w_gamma).mean()
    out = G(np.concatenate([z, zp, zpp]), theta)
    x, xp, xpp = out[:B], out[B: B + len(zp)], out[B + len(zp):]
    fit = (pairwise_cost(cost, x, y) * w_gamma).mean()
    self_cost = (pairwise_cost(cost, xp, xpp) * w_eta).mean()
    return fit - self_cost * 0.5


class TrainResult(NamedTuple):
    networks: Networks
    trace: np.ndarray
    config: TrainConfig


TRACE_COLUMNS = ("iter", "d2_obj", "d4_obj", "q_obj", "g_obj")


class _Optimizers:
    def __init__(self, config: TrainConfig, nets: Networks):
        def adam(n, lr, betas):
            return AdamState.zeros(n, lr, *betas)
        self.G = adam(nets.G.n_params, config.lr_g, config.betas_g)
        self.D2 = adam(nets.D2.head.n_params, config.lr_d, config.betas_d)
        self.D4 = adam(nets.D4.head.n_params, config.lr_d, config.betas_d)
        self.trunk = None if nets.trunk is None else adam(nets.trunk.n_params, config.lr_d, config.betas_d)
        self.Q = None if nets.Q is None else adam(nets.Q.net.head.n_params, config.lr_q, config.betas_q)


def _ascend_critic(critic: Critic, opt: _Optimizers, name: str, objective) -> float:
    value, g = value_and_grad(objective, critic.get_params())
    nt = critic.n_trunk
    if nt:
        critic.trunk.params, opt.trunk = adam_step(opt.trunk, critic.trunk.params, -g[:nt])
    head_state = getattr(opt, name)
    critic.head.params, head_state = adam_step(head_state, critic.head.params, -g[nt:])
    setattr(opt, name, head_state)
    return value


def train_loop(config: TrainConfig, data: DiscreteMeasure, networks: Networks | None = None,
               callback=None) -> TrainResult:
    """Run the alternating dual / (Q, G) scheme for ``config.generator_iters`` iterations.

    ``callback(iteration, networks)`` is invoked after every generator step.
    Raises ``TrainingDiverged`` if any objective becomes non-finite.
    """
    nets = init_networks(config, data.dim) if networks is None else networks
    opt = _Optimizers(config, nets)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(6)[0])
    eps, lam, B, cost = config.epsilon, config.effective_lam, config.batch, config.cost
    latent = config.latent
    uniform = bool(np.all(data.weights == data.weights[0]))

    def draw_z():
        return sample_latent(latent, B, rng)

    def draw_y():
        idx = rng.integers(data.n, size=B) if uniform else rng.choice(data.n, size=B, p=data.weights)
        return data.points[idx]

    trace = np.full((config.generator_iters, len(TRACE_COLUMNS)), np.nan)
    last_good = nets.copy()
    for it in range(config.generator_iters):
        d2_val = d4_val = q_val = math.nan
        try:
            for _ in range(config.n_d):
                z, y = draw_z(), draw_y()
                d2_val = _ascend_critic(nets.D2, opt, "D2", lambda th: d2_objective(
                    z, y, nets.G, nets.D2, nets.Q, eps, lam, cost, params=th))
                if config.uses_d4:
                    zp, zpp = draw_z(), draw_z()
                    d4_val = _ascend_critic(nets.D4, opt, "D4", lambda th: d4_objective(
                        zp, zpp, nets.G, nets.D4, eps, cost, params=th))

            z, y = draw_z(), draw_y()
            zp, zpp = draw_z(), draw_z()
            w_gamma = gamma_weights(z, y, nets.G, nets.D2, nets.Q, eps, lam, cost)
            w_eta = eta_weights(zp, zpp, nets.G, nets.D4, eps, cost) if config.uses_d4 else None

            # both gradients are taken at the same frozen weights before either update
            g_val, g_grad = value_and_grad(
                lambda th: g_objective(z, y, zp, zpp, w_gamma, w_eta, nets.G, cost, params=th),
                nets.G.params)
            if nets.Q is not None:
                nt = nets.Q.net.n_trunk
                trunk_params = nets.Q.net.get_params()[:nt]
                q_val, q_grad = value_and_grad(
                    lambda th: q_objective(z, y, w_gamma, nets.Q, config.weight_decay_q,
                                           params=_join(trunk_params, th, nt)),
                    nets.Q.net.head.params)
                nets.Q.net.head.params, opt.Q = adam_step(opt.Q, nets.Q.net.head.params, q_grad)
            nets.G.params, opt.G = adam_step(opt.G, nets.G.params, g_grad)
        except FloatingPointError as exc:
            raise TrainingDiverged(it, getattr(exc, "op", "objective"), last_good, trace[:it]) from exc

        row = (it, d2_val, d4_val, q_val, g_val)
        checked = [("d2", d2_val), ("g", g_val)]
        if config.uses_d4:
            checked.append(("d4", d4_val))
        if nets.Q is not None:
            checked.append(("q", q_val))
        for name, val in checked:
            if not math.isfinite(val):
                raise TrainingDiverged(it, name, last_good, trace[:it])
        trace[it] = row
        last_good = nets.copy()
        if callback is not None:
            callback(it, nets)
    return TrainResult(nets, trace, config)


def _join(trunk_params: np.ndarray, head: Tensor, nt: int):
    """Parameter vector with a frozen trunk in front of a differentiable head."""
    if nt == 0:
        return head
    return _Concat(trunk_params, head)


class _Concat(Tensor):
    __slots__ = ()

    def __init__(self, frozen: np.ndarray, head: Tensor):
        nt = len(frozen)
        super().__init__(np.concatenate([frozen, head.value]), (head,),
                         lambda g: (g[nt:],), "concat")


def write_trace(path, trace: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow([int(row[0])] + ["" if math.isnan(v) else repr(float(v)) for v in row[1:]])


# evaluation


def generate(G: Mlp, spec: LatentSpec, n_samples: int, seed) -> tuple[np.ndarray, np.ndarray]:
    z = sample_latent(spec, n_samples, seed)
    return z, G.forward(z)


class Coverage(NamedTuple):
    per_mode: np.ndarray
    any_mode: float


def mode_coverage(G: Mlp, spec: LatentSpec, mode_centers, sigma: float, n_samples: int = 5000,
                  seed=0) -> Coverage:
    """Fraction of generated samples within ``3 sigma`` of each mode center, and of any."""
    _, x = generate(G, spec, n_samples, seed)
    return coverage_of(x, mode_centers, sigma)


def coverage_of(x, mode_centers, sigma: float) -> Coverage:
    dist = np.sqrt(cost_matrix(GroundCost.SQL2, x, np.asarray(mode_centers)))
    hit = dist <= 3.0 * sigma
    return Coverage(hit.mean(axis=0), float(hit.any(axis=1).mean()))


def category_agreement(z, x, spec: LatentSpec, mode_centers, sigma: float) -> float:
    """Share of on-mode samples whose categorical code is their mode's majority code.

    Samples farther than ``3 sigma`` from every mode are ignored; each mode is
    labelled with the most frequent argmax category among its samples.
    """
    if spec.cat_dim == 0:
        raise ValueError("latent spec has no categorical block")
    dist = np.sqrt(cost_matrix(GroundCost.SQL2, x, np.asarray(mode_centers)))
    nearest = dist.argmin(axis=1)
    on_mode = dist[np.arange(len(x)), nearest] <= 3.0 * sigma
    if not on_mode.any():
        return 0.0
    cats = np.argmax(np.asarray(z)[:, : spec.cat_dim], axis=1)[on_mode]
    modes = nearest[on_mode]
    counts = np.zeros((len(mode_centers), spec.cat_dim), dtype=np.int64)
    np.add.at(counts, (modes, cats), 1)
    return float(counts.max(axis=1).sum() / on_mode.sum())


def cost_scale(data: DiscreteMeasure, cost: GroundCost | str, max_points: int = 2000) -> float:
    """Mean pairwise ground cost between data atoms (first ``max_points`` atoms)."""
    pts = data.points[:max_points]
    return float(cost_matrix(cost, pts, pts).mean())
