"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest -v tests/test_acceptance.py -s`` or directly with
``python tests/test_acceptance.py``. The training criteria take several
minutes of CPU each; their runs are shared between criteria through
module-scoped fixtures.
"""

from __future__ import annotations

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from otinform import cli
from otinform.measure import (
    DiscreteMeasure,
    LatentSpec,
    cost_matrix,
    gaussian_grid_dataset,
    grid_centers,
    sample_latent,
    total_std,
)
from otinform.nn import Tensor, finite_difference, grad
from otinform.sinkhorn import (
    brute_force_ot,
    entropic_ot_value,
    marginal_violation,
    recover_plan,
    sinkhorn_divergence,
    sinkhorn_potentials,
)
from otinform.train import (
    TrainConfig,
    category_agreement,
    coverage_of,
    cost_scale,
    d2_objective,
    d4_objective,
    eta_weights,
    g_objective,
    gamma_weights,
    init_networks,
    q_objective,
)

pytestmark = pytest.mark.acceptance

# tolerances and budgets
FEASIBILITY_ATOL = 1e-9
FEASIBILITY_BUDGET_S = 30.0
SELF_DIVERGENCE_ATOL = 1e-7
CLOSED_FORM_ATOL = 1e-8
DC_ENTROPY_REDUCTION = 0.30
DC_TRACE_SLACK = 1e-7
DC_BUDGET_S = 120.0
GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-10
GRAD_COORDS = 100
# central-difference steps; a stencil straddling a leaky-ReLU kink spoils the larger step,
# roundoff spoils the smaller one on tiny coordinates, so each coordinate keeps its better estimate
GRAD_STEPS = (1e-5, 1e-6)
COLLAPSE_RATIO = 0.3
SPREAD_BAND = (0.5, 1.5)
COLLAPSE_BUDGET_S = 300.0
MODE_MIN_FRACTION = 0.02
ANY_MODE_FRACTION = 0.80
MODE_RECOVERY_ITERS = 8000
MODE_RECOVERY_BUDGET_S = 900.0
AGREEMENT_MIN = 0.80
BASELINE_AGREEMENT_MAX = 0.30

SIGMA = 0.05
DATA_SIZE = 20000
EVAL_SAMPLES = 5000


@pytest.fixture
def report(capsys):
    """Print one PASS/FAIL line past pytest's capture, then assert on it."""

    def emit(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2} {title}: {detail}"
        with capsys.disabled():
            print(f"\n{line}", flush=True)
        assert passed, line

    return emit


def run_cli(command: str, cfg: dict, out: Path) -> tuple[int, float]:
    out.mkdir(parents=True, exist_ok=True)
    path = out.parent / f"{out.name}.json"
    path.write_text(json.dumps(cfg, indent=2))
    start = time.process_time()
    code = cli.main([command, "--config", str(path), "--out", str(out)])
    return code, time.process_time() - start


def csv_bytes(out: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}


def random_measure(rng, n, uniform=False):
    pts = rng.uniform(0, 1, size=(n, 2))
    if uniform:
        return DiscreteMeasure.uniform(pts)
    w = rng.uniform(0.05, 1.0, size=n)
    return DiscreteMeasure(pts, w / w.sum())


# Sinkhorn solver


def test_criterion_01_feasibility(report):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst, failures = 0.0, 0
    for k in range(50):
        eps = (0.05, 1.0, 20.0)[k % 3]
        cost = ("l1", "sql2")[(k // 3) % 2]
        mu, nu = random_measure(rng, int(rng.integers(1, 201))), random_measure(rng, int(rng.integers(1, 201)))
        C = cost_matrix(cost, mu.points, nu.points)
        pot = sinkhorn_potentials(mu, nu, C, eps)
        err = marginal_violation(recover_plan(pot, mu, nu, C).gamma, mu.weights, nu.weights)
        worst = max(worst, err)
        failures += err > FEASIBILITY_ATOL
    elapsed = time.perf_counter() - start
    report(1, "sinkhorn feasibility", failures == 0 and elapsed < FEASIBILITY_BUDGET_S,
           f"max marginal error {worst:.2e} (<= {FEASIBILITY_ATOL:g}), {elapsed:.1f}s (< {FEASIBILITY_BUDGET_S:g}s)")


def test_criterion_02_debiasing_identity(report):
    rng = np.random.default_rng(202)
    worst = 0.0
    for k in range(20):
        mu = random_measure(rng, int(rng.integers(1, 101)))
        eps = (0.05, 1.0, 20.0)[k % 3]
        for cost in ("l1", "sql2"):
            worst = max(worst, abs(sinkhorn_divergence(mu, mu, cost, eps)))
    report(2, "debiasing identity", worst <= SELF_DIVERGENCE_ATOL,
           f"max |S(mu, mu)| {worst:.2e} (<= {SELF_DIVERGENCE_ATOL:g})")


def test_criterion_03_small_epsilon_exactness(report):
    rng = np.random.default_rng(303)
    worst_margin, count = -math.inf, 0
    for n in range(3, 7):
        for cost in ("l1", "sql2"):
            for _ in range(5):
                mu, nu = random_measure(rng, n, uniform=True), random_measure(rng, n, uniform=True)
                C = cost_matrix(cost, mu.points, nu.points)
                eps = 1e-3 * C.max()
                pot = sinkhorn_potentials(mu, nu, C, eps, eps_scaling=True)
                gap = abs(entropic_ot_value(pot, mu, nu, C) - brute_force_ot(mu, nu, C))
                worst_margin = max(worst_margin, gap / (eps * (1 + math.log(n * n))))
                count += 1
    report(3, "exactness at small epsilon", worst_margin <= 1.0,
           f"worst |W_eps - W| / (eps (1 + log nm)) = {worst_margin:.3f} (<= 1) over {count} instances")


def test_criterion_04_closed_form(report):
    mu = DiscreteMeasure.uniform([[0.0], [1.0]])
    C = np.array([[0.0, 1.0], [1.0, 0.0]])
    worst = 0.0
    for eps in (0.5, 1.0, 2.0):
        a = 1.0 / (2.0 * (1.0 + math.exp(-1.0 / eps)))
        gamma = recover_plan(sinkhorn_potentials(mu, mu, C, eps), mu, mu, C).gamma
        worst = max(worst, float(np.max(np.abs(gamma - [[a, 0.5 - a], [0.5 - a, a]]))))
    report(4, "closed-form 2x2", worst <= CLOSED_FORM_ATOL, f"max error {worst:.2e} (<= {CLOSED_FORM_ATOL:g})")


# informative plan

DC_CONFIG = {
    "seed": 0,
    "dataset": {"source": {"kind": "unit_square", "k": 32},
                "target": {"kind": "diagonal_mixture", "n": 256, "modes": 3, "sigma": SIGMA}},
    "solver": {"epsilon": 20.0, "cost": "sql2"},
    "dc": {"lam": 5.0, "groups": 32},
    "output": {"svg": False},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def dc_run(workdir):
    code, cpu = run_cli("dc-plan", DC_CONFIG, workdir / "dc")
    return code, cpu, workdir / "dc"


def test_criterion_05_dc_sparsification(dc_run, report):
    code, cpu, out = dc_run
    summary = json.loads((out / "summary.json").read_text())
    trace = np.loadtxt(out / "trace.csv", delimiter=",", skiprows=1, ndmin=2)
    increase = float(np.max(np.diff(trace[:, 1]), initial=0.0))
    reduction = summary["relative_entropy_reduction"]
    passed = (code == 0 and reduction >= DC_ENTROPY_REDUCTION and increase <= DC_TRACE_SLACK
              and cpu < DC_BUDGET_S)
    report(5, "DC plan sparsification", passed,
           f"entropy {summary['entropy_lam0']:.6f} -> {summary['entropy']:.6f}, "
           f"reduction {reduction:.2e} (>= {DC_ENTROPY_REDUCTION:g}), max trace increase {increase:.1e} "
           f"(<= {DC_TRACE_SLACK:g}), {cpu:.1f}s CPU (< {DC_BUDGET_S:g}s)")


# gradients


def _gradient_case(name, cost):
    cfg = TrainConfig(batch=64, latent=LatentSpec(9, 0, 23), epsilon=1.5, lam=1.0, shared_trunk=True,
                      cost=cost, seed=5)
    nets = init_networks(cfg)
    rng = np.random.default_rng(6)
    z, zp, zpp = (sample_latent(cfg.latent, cfg.batch, rng) for _ in range(3))
    y = gaussian_grid_dataset(3, SIGMA, cfg.batch, seed=7).points
    eps, lam = cfg.epsilon, cfg.lam
    if name == "d2":
        return (lambda t: d2_objective(z, y, nets.G, nets.D2, nets.Q, eps, lam, cost, params=t)), \
            nets.D2.get_params()
    if name == "d4":
        return (lambda t: d4_objective(zp, zpp, nets.G, nets.D4, eps, cost, params=t)), nets.D4.get_params()
    w = gamma_weights(z, y, nets.G, nets.D2, nets.Q, eps, lam, cost)
    if name == "q":
        return (lambda t: q_objective(z, y, w, nets.Q, 1e-4, params=t)), nets.Q.net.get_params()
    v = eta_weights(zp, zpp, nets.G, nets.D4, eps, cost)
    return (lambda t: g_objective(z, y, zp, zpp, w, v, nets.G, cost, params=t)), nets.G.params


def test_criterion_06_gradients(report):
    details, passed = [], True
    for name in ("d2", "d4", "q", "g"):
        for cost in ("l1", "sql2"):
            fn, theta = _gradient_case(name, cost)
            exact = grad(fn, theta)
            coords = np.random.default_rng(8).choice(len(theta), size=GRAD_COORDS, replace=False)
            a = exact[coords]
            used_per_step = []
            for h in GRAD_STEPS:
                numeric = finite_difference(lambda th: fn(Tensor(th)).item(), theta, coords, h=h)
                bound = GRAD_RTOL * np.maximum(np.abs(a), np.abs(numeric)) + GRAD_ATOL
                used_per_step.append(np.abs(a - numeric) / bound)
            used = float(np.max(np.min(used_per_step, axis=0)))
            passed &= used <= 1.0
            details.append(f"{name}/{cost} {used:.0%}")
    report(6, "gradient correctness", passed,
           f"tolerance used on {GRAD_COORDS} coordinates: " + ", ".join(details))


# training runs


def _collapse_config(kind):
    data = gaussian_grid_dataset(2, SIGMA, DATA_SIZE, seed=0)
    eps = 1e-3 * cost_scale(data, "sql2")
    return {
        "seed": 0,
        "dataset": {"train": {"kind": "gaussian_grid", "k_side": 2, "sigma": SIGMA, "n": DATA_SIZE}},
        "train": {"loss_kind": kind, "cost": "sql2", "epsilon": eps, "batch": 256, "generator_iters": 3000},
        "output": {"svg": False, "eval_samples": EVAL_SAMPLES},
    }


MODE_CONFIG = {
    "seed": 0,
    "dataset": {"train": {"kind": "gaussian_grid", "k_side": 3, "sigma": SIGMA, "n": DATA_SIZE}},
    "train": {"loss_kind": "info_sinkhorn", "cost": "l1", "epsilon": 1.5, "lam": 1.0, "n_d": 5,
              "latent": {"cat_dim": 9, "uni_dim": 0, "noise_dim": 23},
              "generator_iters": MODE_RECOVERY_ITERS},
    "output": {"svg": False, "eval_samples": EVAL_SAMPLES},
}


@pytest.fixture(scope="module")
def collapse_runs(workdir):
    return {kind: (*run_cli("train", _collapse_config(kind), workdir / kind), workdir / kind)
            for kind in ("smoothed_ot", "sinkhorn")}


@pytest.fixture(scope="module")
def mode_run(workdir):
    return (*run_cli("train", MODE_CONFIG, workdir / "info"), workdir / "info")


def _samples(out: Path):
    x = DiscreteMeasure.from_csv(out / "samples.csv").points
    cats_path = out / "categories.csv"
    cats = np.loadtxt(cats_path, delimiter=",", skiprows=1, dtype=int)[:, 1] if cats_path.exists() else None
    return x, cats


def test_criterion_07_collapse(collapse_runs, report):
    dstd = total_std(gaussian_grid_dataset(2, SIGMA, DATA_SIZE, seed=0).points)
    ratios, cpus, codes = {}, {}, {}
    for kind, (code, cpu, out) in collapse_runs.items():
        x, _ = _samples(out)
        ratios[kind], cpus[kind], codes[kind] = total_std(x) / dstd, cpu, code
    lo, hi = SPREAD_BAND
    passed = (all(c == 0 for c in codes.values()) and ratios["smoothed_ot"] < COLLAPSE_RATIO
              and lo <= ratios["sinkhorn"] <= hi and max(cpus.values()) < COLLAPSE_BUDGET_S)
    report(7, "collapse analogue", passed,
           f"std ratio smoothed_ot {ratios['smoothed_ot']:.3f} (< {COLLAPSE_RATIO:g}), "
           f"sinkhorn {ratios['sinkhorn']:.3f} (in [{lo:g}, {hi:g}]), "
           f"CPU {cpus['smoothed_ot']:.0f}s / {cpus['sinkhorn']:.0f}s (< {COLLAPSE_BUDGET_S:g}s each)")


def test_criterion_08_mode_recovery(mode_run, report):
    code, cpu, out = mode_run
    x, _ = _samples(out)
    cov = coverage_of(x, grid_centers(3), SIGMA)
    passed = (code == 0 and len(x) == EVAL_SAMPLES and cov.per_mode.min() >= MODE_MIN_FRACTION
              and cov.any_mode >= ANY_MODE_FRACTION and cpu < MODE_RECOVERY_BUDGET_S)
    report(8, "mode recovery", passed,
           f"min per-mode fraction {cov.per_mode.min():.3f} (>= {MODE_MIN_FRACTION:g}), "
           f"within 3 sigma of a mode {cov.any_mode:.3f} (>= {ANY_MODE_FRACTION:g}), "
           f"{MODE_RECOVERY_ITERS} iterations, {cpu:.0f}s CPU (< {MODE_RECOVERY_BUDGET_S:g}s)")


def test_criterion_09_informativeness(mode_run, workdir, report):
    baseline_cfg = json.loads(json.dumps(MODE_CONFIG))
    baseline_cfg["train"]["loss_kind"] = "sinkhorn"
    code_b, _ = run_cli("train", baseline_cfg, workdir / "baseline")
    spec = LatentSpec(9, 0, 23)
    scores = {}
    for name, out in (("info", mode_run[2]), ("baseline", workdir / "baseline")):
        x, cats = _samples(out)
        scores[name] = category_agreement(np.eye(9)[cats], x, spec, grid_centers(3), SIGMA)
    passed = (mode_run[0] == 0 and code_b == 0 and scores["info"] >= AGREEMENT_MIN
              and scores["baseline"] <= BASELINE_AGREEMENT_MAX)
    report(9, "informativeness probe", passed,
           f"agreement info_sinkhorn {scores['info']:.3f} (>= {AGREEMENT_MIN:g}), "
           f"lambda = 0 baseline {scores['baseline']:.3f} (<= {BASELINE_AGREEMENT_MAX:g}, chance 1/9)")


def test_criterion_10_determinism(dc_run, collapse_runs, mode_run, workdir, report):
    runs = {"dc": ("dc-plan", DC_CONFIG, dc_run[2]), "info": ("train", MODE_CONFIG, mode_run[2])}
    runs.update({kind: ("train", _collapse_config(kind), out) for kind, (_, _, out) in collapse_runs.items()})
    mismatched, codes, n_files = [], [], 0
    for name, (command, cfg, out) in runs.items():
        code, _ = run_cli(command, cfg, workdir / f"{name}_again")
        codes.append(code)
        first, again = csv_bytes(out), csv_bytes(workdir / f"{name}_again")
        n_files += len(first)
        if not first or first != again:
            mismatched.append(name)
    report(10, "determinism", not mismatched and all(c == 0 for c in codes),
           f"{n_files} CSV files compared across {len(runs)} reruns, mismatched runs: {mismatched or 'none'}")

if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
