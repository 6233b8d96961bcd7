"""Command-line front end.

    otinform sinkhorn  --config run.json --out results/
    otinform dc-plan   --config run.json
    otinform train     --config run.json --seed 3
    otinform selfcheck [--checkpoint G.mlp]

Configs are strict JSON with the sections ``dataset``, ``solver``, ``dc``,
``train`` and ``output`` plus a top-level ``seed``. Every field has a default;
unknown keys are rejected with their line number.

Exit codes: 0 success, 1 selfcheck failure, 2 configuration error,
3 solver non-convergence (outputs still written), 4 training aborted on a
non-finite objective (last finite checkpoint saved).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import os
import re
import sys
import warnings
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from threadpoolctl import threadpool_limits

from otinform import svg
from otinform.inform import bucket_groups, dc_informative_plan, marginalize_plan
from otinform.measure import (
    DiscreteMeasure,
    GroundCost,
    LatentSpec,
    cost_matrix,
    diagonal_mixture_dataset,
    gaussian_grid_dataset,
    grid_centers,
    sample_latent,
    total_std,
    unit_square_grid,
)
from otinform.nn import AdamState, Mlp, Tensor, adam_step, finite_difference, grad
from otinform.sinkhorn import (
    ConvergenceWarning,
    entropic_ot_value,
    entropy,
    plan_matrix,
    sinkhorn_divergence,
    sinkhorn_potentials,
    write_plan_csv,
)
from otinform.train import (
    TrainConfig,
    TrainingDiverged,
    category_agreement,
    coverage_of,
    d2_objective,
    d4_objective,
    eta_weights,
    g_objective,
    gamma_weights,
    generate,
    init_networks,
    q_objective,
    train_loop,
    write_trace,
)

EXIT_OK = 0
EXIT_SELFCHECK = 1
EXIT_CONFIG = 2
EXIT_NONCONVERGED = 3
EXIT_DIVERGED = 4

THREADS_ENV = "OTINFORM_THREADS"


class ConfigError(ValueError):
    pass


# configuration

MEASURE_KEYS = {
    "gaussian_grid": {"k_side": 3, "sigma": 0.05, "n": 20000, "seed": None},
    "diagonal_mixture": {"n": 256, "modes": 3, "sigma": 0.05, "seed": None},
    "unit_square": {"k": 32},
    "csv": {"path": ""},
    "points": {"points": [], "weights": None},
}

_TRAIN_DEFAULTS = {f.name: f.default for f in fields(TrainConfig)
                   if f.name not in ("latent", "seed", "cost", "loss_kind")}
_TRAIN_DEFAULTS.update({"cost": "l1", "loss_kind": "info_sinkhorn",
                        "latent": {"cat_dim": 9, "uni_dim": 0, "noise_dim": 23},
                        "betas_d": [0.0, 0.9], "betas_g": [0.0, 0.9], "betas_q": [0.0, 0.9]})

DEFAULTS = {
    "seed": 0,
    "dataset": {
        "source": {"kind": "unit_square", "k": 32},
        "target": {"kind": "diagonal_mixture", "n": 256, "modes": 3, "sigma": 0.05},
        "train": {"kind": "gaussian_grid", "k_side": 3, "sigma": 0.05, "n": 20000},
    },
    "solver": {"epsilon": 20.0, "cost": "sql2", "tol": 1e-9, "max_iter": 10000, "eps_scaling": False},
    "dc": {"lam": 5.0, "outer_iters": 50, "tol": 1e-10, "groups": 32, "group_axis": 0,
           "group_range": [0.0, 1.0]},
    "train": _TRAIN_DEFAULTS,
    "output": {"dir": "out", "svg": True, "eval_samples": 5000, "eval_seed": 123},
}


def _line_of(text: str, path: list[str]) -> int | None:
    """Best-effort line of the key at ``path``, searching each key after its parent."""
    pos = 0
    for key in path:
        m = re.compile(r'"' + re.escape(key) + r'"\s*:').search(text, pos)
        if m is None:
            return None
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _reject_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigError(f"duplicate key {k!r}")
        out[k] = v
    return out


def _type_ok(default, value) -> bool:
    if default is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, (list, tuple)):
        return isinstance(value, list)
    return isinstance(value, type(default))


def _merge(defaults: dict, user, path: list[str], text: str) -> dict:
    where = ".".join(path) or "top level"
    if not isinstance(user, dict):
        raise ConfigError(f"{where}: expected an object")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        here = path + [key]
        if key not in defaults:
            line = _line_of(text, here)
            at = f" (line {line})" if line else ""
            raise ConfigError(f"unknown key {'.'.join(here)!r}{at}")
        if path == ["dataset"]:
            out[key] = _merge_measure(value, here, text)
        elif isinstance(defaults[key], dict) and key != "latent":
            out[key] = _merge(defaults[key], value, here, text)
        elif key == "latent":
            out[key] = _merge(defaults[key], value, here, text)
        else:
            if not _type_ok(defaults[key], value):
                line = _line_of(text, here)
                at = f" (line {line})" if line else ""
                raise ConfigError(f"{'.'.join(here)}{at}: expected {type(defaults[key]).__name__}, "
                                  f"got {type(value).__name__}")
            out[key] = value
    return out


def _merge_measure(user, path: list[str], text: str) -> dict:
    if not isinstance(user, dict) or "kind" not in user:
        raise ConfigError(f"{'.'.join(path)}: a measure needs a 'kind' among {sorted(MEASURE_KEYS)}")
    kind = user["kind"]
    if kind not in MEASURE_KEYS:
        raise ConfigError(f"{'.'.join(path)}: unknown measure kind {kind!r}")
    rest = {k: v for k, v in user.items() if k != "kind"}
    return {"kind": kind, **_merge(MEASURE_KEYS[kind], rest, path, text)}


def parse_config(text: str) -> dict:
    """Merge a JSON document over the defaults, rejecting unknown or mistyped keys."""
    try:
        user = json.loads(text, object_pairs_hook=_reject_duplicates) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return _merge(DEFAULTS, user, [], text)


@dataclass
class Experiment:
    raw: dict
    train: TrainConfig
    base_dir: Path

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def solver(self) -> dict:
        return self.raw["solver"]

    @property
    def dc(self) -> dict:
        return self.raw["dc"]

    @property
    def output(self) -> dict:
        return self.raw["output"]

    def measure(self, role: str) -> DiscreteMeasure:
        return build_measure(self.raw["dataset"][role], self.seed, self.base_dir)


def load_experiment(config_path: str | None, seed: int | None = None, out: str | None = None) -> Experiment:
    text, base = "", Path.cwd()
    if config_path is not None:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        base = Path(config_path).resolve().parent
    raw = parse_config(text)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output"]["dir"] = out
    if not (isinstance(raw["seed"], int) and 0 <= raw["seed"] < 2**64):
        raise ConfigError("seed must be an unsigned 64-bit integer")
    _validate(raw)
    t = dict(raw["train"])
    try:
        train = TrainConfig(**{**t, "latent": LatentSpec(**t["latent"]), "seed": raw["seed"]})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None
    return Experiment(raw, train, base)


def _validate(raw: dict) -> None:
    s, d, o = raw["solver"], raw["dc"], raw["output"]
    try:
        GroundCost.parse(s["cost"])
    except ValueError as exc:
        raise ConfigError(f"solver.cost: {exc}") from None
    checks = [
        (s["epsilon"] > 0, "solver.epsilon must be positive"),
        (s["tol"] > 0, "solver.tol must be positive"),
        (s["max_iter"] >= 1, "solver.max_iter must be >= 1"),
        (d["lam"] >= 0, "dc.lam must be nonnegative"),
        (d["outer_iters"] >= 0, "dc.outer_iters must be >= 0"),
        (d["groups"] >= 1, "dc.groups must be >= 1"),
        (len(d["group_range"]) == 2 and d["group_range"][0] < d["group_range"][1],
         "dc.group_range must be [lo, hi] with lo < hi"),
        (o["eval_samples"] >= 1, "output.eval_samples must be >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def build_measure(spec: dict, seed: int, base_dir: Path) -> DiscreteMeasure:
    kind = spec["kind"]
    s = spec.get("seed")
    s = seed if s is None else s
    try:
        if kind == "gaussian_grid":
            return gaussian_grid_dataset(spec["k_side"], spec["sigma"], spec["n"], s)
        if kind == "diagonal_mixture":
            return diagonal_mixture_dataset(spec["n"], spec["modes"], spec["sigma"], s)
        if kind == "unit_square":
            return unit_square_grid(spec["k"])
        if kind == "csv":
            return DiscreteMeasure.from_csv(base_dir / spec["path"])
        pts = np.asarray(spec["points"], dtype=np.float64)
        if spec["weights"] is None:
            return DiscreteMeasure.uniform(pts)
        return DiscreteMeasure(pts, spec["weights"])
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"dataset ({kind}): {exc}") from None


# commands


def _out_dir(exp: Experiment) -> Path:
    out = Path(exp.output["dir"])
    if not out.is_absolute():
        out = Path.cwd() / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_sinkhorn(exp: Experiment) -> int:
    out = _out_dir(exp)
    mu, nu = exp.measure("source"), exp.measure("target")
    s = exp.solver
    C = cost_matrix(s["cost"], mu.points, nu.points)
    pot = sinkhorn_potentials(mu, nu, C, s["epsilon"], s["tol"], s["max_iter"], s["eps_scaling"])
    gamma = plan_matrix(pot, mu, nu, C)
    value = entropic_ot_value(pot, mu, nu, C)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        divergence = sinkhorn_divergence(mu, nu, s["cost"], s["epsilon"], s["tol"], s["max_iter"],
                                         s["eps_scaling"])
    converged = pot.converged and not any(issubclass(w.category, ConvergenceWarning) for w in caught)

    with open(out / "potentials.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["side", "index", "value"])
        writer.writerows(("f", i, repr(float(v))) for i, v in enumerate(pot.f))
        writer.writerows(("g", j, repr(float(v))) for j, v in enumerate(pot.g))
    write_plan_csv(out / "plan.csv", gamma, {"epsilon": float(s["epsilon"]), "value": value,
                                             "converged": bool(pot.converged)})
    _write_json(out / "values.json", {
        "cost": GroundCost.parse(s["cost"]).value,
        "epsilon": float(s["epsilon"]),
        "entropic_ot": value,
        "sinkhorn_divergence": divergence,
        "converged": bool(converged),
        "iterations": pot.iterations,
        "marginal_error": pot.marginal_error,
        "plan_entropy": entropy(gamma),
        "product_entropy": entropy(np.outer(mu.weights, nu.weights)),
    })
    if not converged:
        print(f"sinkhorn: not converged (marginal error {pot.marginal_error:.3e})", file=sys.stderr)
        return EXIT_NONCONVERGED
    print(f"sinkhorn: W = {value!r}, S = {divergence!r}, {pot.iterations} iterations")
    return EXIT_OK


def _write_dc_trace(path: Path, trace) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["outer_iter", "objective", "marginal_kl", "entropy"])
        for step in trace:
            writer.writerow([step.outer_iter, repr(step.objective), repr(step.marginal_kl), repr(step.entropy)])


def cmd_dc_plan(exp: Experiment) -> int:
    out = _out_dir(exp)
    zeta, nu = exp.measure("source"), exp.measure("target")
    s, d = exp.solver, exp.dc
    C = cost_matrix(s["cost"], zeta.points, nu.points)
    if not 0 <= d["group_axis"] < zeta.dim:
        raise ConfigError(f"dc.group_axis must index a source coordinate (< {zeta.dim})")
    groups = bucket_groups(zeta.points, d["groups"], d["group_axis"], *d["group_range"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        runs = {}
        for lam in (0.0, float(d["lam"])):
            runs[lam] = dc_informative_plan(zeta, nu, C, groups, s["epsilon"], lam, d["outer_iters"],
                                            d["tol"], s["tol"], s["max_iter"])
    for w in caught:
        if not issubclass(w.category, ConvergenceWarning):
            print(f"dc-plan: {w.message}", file=sys.stderr)
    converged = all(step.inner_converged for _, trace in runs.values() for step in trace)

    (plan0, trace0), (plan, trace) = runs[0.0], runs[float(d["lam"])]
    write_plan_csv(out / "plan_lam0.csv", plan0.gamma,
                   {"epsilon": float(s["epsilon"]), "lam": 0.0, "objective": trace0[-1].objective})
    write_plan_csv(out / "plan.csv", plan.gamma,
                   {"epsilon": float(s["epsilon"]), "lam": float(d["lam"]), "objective": trace[-1].objective})
    _write_dc_trace(out / "trace.csv", trace)
    values = [step.objective for step in trace]
    ent0, ent = trace0[-1].entropy, trace[-1].entropy
    _write_json(out / "summary.json", {
        "epsilon": float(s["epsilon"]),
        "lam": float(d["lam"]),
        "entropy_lam0": ent0,
        "entropy": ent,
        "relative_entropy_reduction": (ent0 - ent) / ent0 if ent0 > 0 else 0.0,
        "marginal_kl_lam0": trace0[-1].marginal_kl,
        "marginal_kl": trace[-1].marginal_kl,
        "max_objective_increase": max([b - a for a, b in zip(values, values[1:])], default=0.0),
        "outer_iterations": trace[-1].outer_iter,
        "converged": bool(converged),
    })
    if exp.output["svg"]:
        order = np.argsort(nu.points[:, 0], kind="stable")
        k0 = marginalize_plan(plan0, groups, d["groups"]).kappa[:, order]
        k1 = marginalize_plan(plan, groups, d["groups"]).kappa[:, order]
        svg.heatmaps(out / "marginals.svg", [("lambda = 0", k0), (f"lambda = {d['lam']:g}", k1)])
    if not converged:
        print("dc-plan: an inner Sinkhorn solve did not converge", file=sys.stderr)
        return EXIT_NONCONVERGED
    print(f"dc-plan: marginal entropy {ent0:.6f} -> {ent:.6f}")
    return EXIT_OK


def _save_networks(out: Path, nets) -> None:
    nets.G.save(out / "G.mlp")
    nets.D2.head.save(out / "D2.mlp")
    nets.D4.head.save(out / "D4.mlp")
    if nets.Q is not None:
        nets.Q.net.head.save(out / "DQ.mlp")
    if nets.trunk is not None:
        nets.trunk.save(out / "trunk.mlp")


def cmd_train(exp: Experiment) -> int:
    out = _out_dir(exp)
    data = exp.measure("train")
    cfg = exp.train
    if data.dim != 2 and exp.output["svg"]:
        raise ConfigError("output.svg needs two-dimensional training data")
    try:
        result = train_loop(cfg, data)
    except TrainingDiverged as exc:
        _save_networks(out, exc.last_good)
        write_trace(out / "trace.csv", exc.trace)
        print(f"train: {exc}; last finite networks saved to {out}", file=sys.stderr)
        return EXIT_DIVERGED
    nets = result.networks
    _save_networks(out, nets)
    write_trace(out / "trace.csv", result.trace)

    z, x = generate(nets.G, cfg.latent, exp.output["eval_samples"], exp.output["eval_seed"])
    DiscreteMeasure.uniform(x).to_csv(out / "samples.csv")
    cats = np.argmax(z[:, : cfg.latent.cat_dim], axis=1) if cfg.latent.cat_dim else None
    if cats is not None:
        with open(out / "categories.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["index", "category"])
            writer.writerows(enumerate(cats.tolist()))

    report = {"loss_kind": cfg.loss_kind.value, "generator_iters": cfg.generator_iters,
              "data_std": total_std(data.points), "sample_std": total_std(x)}
    report["std_ratio"] = report["sample_std"] / report["data_std"] if report["data_std"] > 0 else math.nan
    spec = exp.raw["dataset"]["train"]
    if spec["kind"] == "gaussian_grid":
        centers = grid_centers(spec["k_side"])
        cov = coverage_of(x, centers, spec["sigma"])
        report["mode_coverage"] = [float(v) for v in cov.per_mode]
        report["any_mode_coverage"] = cov.any_mode
        if cats is not None:
            report["category_agreement"] = category_agreement(z, x, cfg.latent, centers, spec["sigma"])
    _write_json(out / "report.json", report)
    if exp.output["svg"]:
        svg.scatter(out / "samples.svg", x, cats, background=data.points[:2000],
                    title=f"{cfg.loss_kind.value}, {cfg.generator_iters} generator iterations")
    print(f"train: std ratio {report['std_ratio']:.3f}"
          + (f", any-mode coverage {report['any_mode_coverage']:.3f}" if "any_mode_coverage" in report else ""))
    return EXIT_OK


# selfcheck


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str = ""


def _tolerance_used(a, b, rtol=1e-4, atol=1e-10) -> float:
    """Worst ``|a - b| / (rtol * max(|a|, |b|) + atol)``; at most 1 means within tolerance."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / (rtol * np.maximum(np.abs(a), np.abs(b)) + atol)))


def _check_closed_form() -> tuple[bool, str]:
    mu = DiscreteMeasure.uniform([[0.0], [1.0]])
    C = np.array([[0.0, 1.0], [1.0, 0.0]])
    worst = 0.0
    for eps in (0.5, 1.0, 2.0):
        a = 1.0 / (2.0 * (1.0 + math.exp(-1.0 / eps)))
        gamma = plan_matrix(sinkhorn_potentials(mu, mu, C, eps), mu, mu, C)
        worst = max(worst, float(np.max(np.abs(gamma - [[a, 0.5 - a], [0.5 - a, a]]))))
    return worst <= 1e-8, f"max error {worst:.2e}"


def _check_zero_diagonal(cost_fn) -> tuple[bool, str]:
    X = np.random.default_rng(0).standard_normal((20, 2))
    worst = max(float(np.max(np.abs(np.diag(cost_fn(c, X, X))))) for c in GroundCost)
    return worst == 0.0, f"max |c(x, x)| = {worst:.2e}"


def _check_symmetry(cost_fn) -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    X, Y = rng.standard_normal((7, 2)), rng.standard_normal((5, 2))
    ok = all(np.array_equal(cost_fn(c, X, Y), cost_fn(c, Y, X).T) for c in GroundCost)
    return ok, "" if ok else "c(X, Y) != c(Y, X)^T"


def _check_feasibility(cost_fn) -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    worst = 0.0
    for eps in (0.05, 1.0, 20.0):
        mu = DiscreteMeasure.uniform(rng.uniform(-1, 1, (30, 2)))
        w = rng.uniform(0.1, 1, 25)
        nu = DiscreteMeasure(rng.uniform(-1, 1, (25, 2)), w / w.sum())
        C = cost_fn("sql2", mu.points, nu.points)
        gamma = plan_matrix(sinkhorn_potentials(mu, nu, C, eps), mu, nu, C)
        worst = max(worst, float(np.max(np.abs(gamma.sum(1) - mu.weights))),
                    float(np.max(np.abs(gamma.sum(0) - nu.weights))))
    return worst <= 1e-9, f"max marginal error {worst:.2e}"


def _check_self_divergence() -> tuple[bool, str]:
    mu = DiscreteMeasure.uniform(np.random.default_rng(3).uniform(-1, 1, (40, 2)))
    worst = max(abs(sinkhorn_divergence(mu, mu, c, 0.5)) for c in GroundCost)
    return worst <= 1e-7, f"|S(mu, mu)| = {worst:.2e}"


def _small_networks():
    cfg = TrainConfig(batch=8, width=8, depth=2, latent=LatentSpec(3, 1, 4), epsilon=0.5, lam=0.3,
                      shared_trunk=True, seed=7)
    nets = init_networks(cfg)
    rng = np.random.default_rng(4)
    z, zp, zpp = (sample_latent(cfg.latent, 8, rng) for _ in range(3))
    y = rng.standard_normal((8, 2))
    return cfg, nets, z, zp, zpp, y


def _check_gradient(name: str) -> tuple[bool, str]:
    cfg, nets, z, zp, zpp, y = _small_networks()
    eps, lam, cost = cfg.epsilon, cfg.lam, cfg.cost
    if name == "d2":
        fn, theta = (lambda t: d2_objective(z, y, nets.G, nets.D2, nets.Q, eps, lam, cost, params=t)), \
            nets.D2.get_params()
    elif name == "d4":
        fn, theta = (lambda t: d4_objective(zp, zpp, nets.G, nets.D4, eps, cost, params=t)), nets.D4.get_params()
    else:
        w = gamma_weights(z, y, nets.G, nets.D2, nets.Q, eps, lam, cost)
        if name == "q":
            fn, theta = (lambda t: q_objective(z, y, w, nets.Q, 1e-3, params=t)), nets.Q.net.get_params()
        else:
            v = eta_weights(zp, zpp, nets.G, nets.D4, eps, cost)
            fn, theta = (lambda t: g_objective(z, y, zp, zpp, w, v, nets.G, cost, params=t)), nets.G.params
    exact = grad(fn, theta)
    coords = np.random.default_rng(5).choice(len(theta), size=min(30, len(theta)), replace=False)
    numeric = finite_difference(lambda th: fn(Tensor(th)).item(), theta, coords)
    used = _tolerance_used(exact[coords], numeric)
    return used <= 1.0, f"{used:.1%} of tolerance used on {len(coords)} coordinates"


def _check_row_means() -> tuple[bool, str]:
    cfg, nets, z, zp, zpp, y = _small_networks()
    w = gamma_weights(z, y, nets.G, nets.D2, nets.Q, cfg.epsilon, cfg.lam, cfg.cost)
    v = eta_weights(zp, zpp, nets.G, nets.D4, cfg.epsilon, cfg.cost)
    worst = max(float(np.max(np.abs(w.mean(1) - 1))), float(np.max(np.abs(v.mean(1) - 1))))
    return worst <= 1e-12, f"max |row mean - 1| = {worst:.2e}"


def _check_adam() -> tuple[bool, str]:
    g = np.array([3.0, -0.5, 1e3])
    new, _ = adam_step(AdamState.zeros(3, 1e-3), np.zeros(3), g)
    worst = float(np.max(np.abs(new + 1e-3 * np.sign(g))))
    return worst <= 1e-8, f"first step off sign descent by {worst:.2e}"


def _check_checkpoint(path) -> tuple[bool, str]:
    try:
        net = Mlp.load(path)
    except (OSError, ValueError) as exc:
        return False, str(exc)
    out = net.forward(np.zeros((1, net.in_dim)))
    return bool(np.all(np.isfinite(out))), f"{net.n_params} parameters"


def run_selfcheck(checkpoint=None, cost_fn: Callable = cost_matrix) -> list[CheckResult]:
    """Closed-form, gradient and invariant checks; ``cost_fn`` replaces the ground cost under test."""
    checks: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
        ("closed form 2x2", _check_closed_form),
        ("zero diagonal", lambda: _check_zero_diagonal(cost_fn)),
        ("cost symmetry", lambda: _check_symmetry(cost_fn)),
        ("plan feasibility", lambda: _check_feasibility(cost_fn)),
        ("self divergence", _check_self_divergence),
        ("weight row means", _check_row_means),
        ("adam first step", _check_adam),
    ]
    checks += [(f"gradient {n}", lambda n=n: _check_gradient(n)) for n in ("d2", "d4", "q", "g")]
    if checkpoint is not None:
        checks.append(("checkpoint", lambda: _check_checkpoint(checkpoint)))
    results = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail))
    return results


def cmd_selfcheck(checkpoint=None, cost_fn: Callable = cost_matrix) -> int:
    results = run_selfcheck(checkpoint, cost_fn)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}" + (f": {r.detail}" if r.detail else ""))
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFCHECK


# entry point


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override output.dir")
    parser = argparse.ArgumentParser(prog="otinform", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("sinkhorn", parents=[common], help="entropic OT plan and Sinkhorn divergence")
    sub.add_parser("dc-plan", parents=[common], help="informative plan by DC iterations")
    sub.add_parser("train", parents=[common], help="train a generator")
    check = sub.add_parser("selfcheck", help="run built-in correctness checks")
    check.add_argument("--checkpoint", help="also validate an MLP checkpoint file")
    return parser


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        with threadpool_limits(limits=_threads()):
            if args.command == "selfcheck":
                return cmd_selfcheck(args.checkpoint)
            exp = load_experiment(args.config, args.seed, args.out)
            command = {"sinkhorn": cmd_sinkhorn, "dc-plan": cmd_dc_plan, "train": cmd_train}[args.command]
            return command(exp)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
