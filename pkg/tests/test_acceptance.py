"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (also collected in the terminal
summary) and then asserts. Set POPBIAS_ACCEPTANCE_OUT to keep the emitted
result files; otherwise they go to a pytest temporary directory.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from popbias.analysis import (
    CorrelationBlock,
    TwoItemWalkConfig,
    estimate_rho_min,
    lock_in_experiment,
    nonidentifiability_demo,
    rank_size_empirical,
    rho_min_grid,
)
from popbias.choice import softmax_choice
from popbias.harness import ExperimentConfig, emit_results, run_experiment, summarize, sweep
from popbias.qp import FilteredHistory, gamma_t, log_likelihood, log_likelihood_gradient, tau_min

pytestmark = pytest.mark.acceptance

E = math.e


@pytest.fixture(scope="module")
def out_dir(tmp_path_factory):
    env = os.environ.get("POPBIAS_ACCEPTANCE_OUT")
    path = Path(env) if env else tmp_path_factory.mktemp("acceptance")
    path.mkdir(parents=True, exist_ok=True)
    return path


def test_choice_model_exactness(acceptance_report):
    start = time.perf_counter()
    half = softmax_choice([0.0]).item_probs[0]
    logit = softmax_choice([1.0]).item_probs[0]
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        dist = softmax_choice(rng.uniform(-3.0, 3.0, size=rng.integers(1, 8)))
        worst = max(worst, abs(dist.no_click_prob + dist.item_probs.sum() - 1.0))
    elapsed = time.perf_counter() - start
    ok = abs(half - 0.5) <= 1e-12 and abs(logit - E / (1 + E)) <= 1e-12 and worst <= 1e-12 and elapsed < 1.0
    acceptance_report(
        1,
        "choice model",
        ok,
        f"P(0)={half:.15f} P(1)={logit:.15f} max normalization error={worst:.1e} in {elapsed:.2f}s",
    )
    assert ok


def test_likelihood_gradient(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        M, d, n = int(rng.integers(1, 4)), int(rng.integers(1, 9)), int(rng.integers(1, 51))
        X = rng.normal(size=(n, d))
        fh = FilteredHistory.from_arrays(X, rng.integers(0, M + 1, size=n), M)
        psi = rng.normal(scale=0.5, size=(M, d))
        kappa = rng.uniform(-1, 1, size=M)
        lam = float(rng.uniform(0.1, 2.0))
        g = log_likelihood_gradient(psi, fh, lam, kappa)
        num = np.zeros_like(psi)
        h = 1e-5
        for idx in np.ndindex(psi.shape):
            up, dn = psi.copy(), psi.copy()
            up[idx] += h
            dn[idx] -= h
            num[idx] = (log_likelihood(up, fh, lam, kappa) - log_likelihood(dn, fh, lam, kappa)) / (2 * h)
        worst = max(worst, np.linalg.norm(g - num) / max(1.0, np.linalg.norm(num)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 10
    acceptance_report(2, "likelihood gradient", ok, f"max relative error {worst:.2e} over 50 instances in {elapsed:.2f}s")
    assert ok


def _tau_reference(M, b, a, N, delta):
    return 8.0 * M * b / a * (math.log(N) - math.log(delta))


def _gamma_reference(t, delta, M, d, L, lam):
    inner = math.log(1.0 / delta) + M * d * math.log1p(t / (lam * d))
    return 4.0 * math.exp(4.0) * M**2 * (math.sqrt(lam * M) * L + 2.0 * math.sqrt(inner))


def test_closed_form_constants(acceptance_report):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        M, N = int(rng.integers(1, 6)), int(rng.integers(5, 200))
        b, a, delta = rng.uniform(0.01, 1), rng.uniform(0.001, 0.5), rng.uniform(0.001, 0.5)
        t, d, L, lam = rng.uniform(1, 1e5), int(rng.integers(1, 20)), rng.uniform(0.5, 3), rng.uniform(0.01, 10)
        for ours, ref in (
            (tau_min(M, b, a, N, delta), _tau_reference(M, b, a, N, delta)),
            (gamma_t(t, delta, M, d, L, lam), _gamma_reference(t, delta, M, d, L, lam)),
        ):
            worst = max(worst, abs(ours - ref) / max(1.0, abs(ref)))
    ok = worst <= 1e-10
    acceptance_report(3, "closed-form constants", ok, f"max relative deviation {worst:.1e} over 20 tuples")
    assert ok


def test_rho_min(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst, mismatches = 0.0, 0
    for _ in range(20):
        dq, dp = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        n = int(rng.integers(dq + dp, 3 * (dq + dp)))
        X = rng.normal(size=(n, dq + dp))
        X[:, dq:] += X[:, :1] * rng.normal(size=(1, dp))
        block = CorrelationBlock.from_features(X[:, :dq], X[:, dq:])
        res, grid = estimate_rho_min(block), rho_min_grid(block)
        if grid is None:
            mismatches += res.feasible and res.rho <= 1 - 1e-4
        elif not res.feasible:
            mismatches += 1
        else:
            worst = max(worst, abs(res.rho - grid))
    ones = estimate_rho_min(CorrelationBlock.from_matrix(np.ones((4, 4)), 2))
    free = estimate_rho_min(CorrelationBlock(np.eye(3), np.zeros((3, 2)), np.zeros((2, 2))), tol=1e-6)
    elapsed = time.perf_counter() - start
    ok = worst <= 2e-4 and not mismatches and not ones.feasible and free.feasible and free.rho <= 1e-6 and elapsed < 30
    acceptance_report(
        4,
        "rho_min",
        ok,
        f"max |bisection - grid| {worst:.1e}, feasibility mismatches {mismatches}, "
        f"all-ones feasible={ones.feasible}, no-popularity rho={free.rho} in {elapsed:.1f}s",
    )
    assert ok


def test_nonidentifiability(acceptance_report, out_dir):
    start = time.perf_counter()
    report = nonidentifiability_demo(0.1, steps=100_000, seed=5)
    elapsed = time.perf_counter() - start
    (out_dir / "nonidentifiability.json").write_text(json.dumps(report.to_dict(), indent=2))
    rates = [r for world in report.empirical_rates for r in world]
    dev = max(abs(r - E / (1 + E)) for r in rates)
    ok = report.max_exact_gap() <= 1e-12 and dev <= 0.01 and elapsed < 60
    acceptance_report(
        5,
        "nonidentifiable pair",
        ok,
        f"exact gap {report.max_exact_gap():.1e}, max empirical deviation {dev:.4f} in {elapsed:.1f}s",
    )
    assert ok


def test_two_item_walk(acceptance_report, out_dir):
    start = time.perf_counter()
    walk = TwoItemWalkConfig.from_rank_bias((1.0, 0.0))
    res = rank_size_empirical(walk, 50_000, range(50))
    elapsed = time.perf_counter() - start
    (out_dir / "walk.json").write_text(json.dumps(res.to_dict(), indent=2))
    share_ok = abs(res.pi1 - walk.p) <= 0.02
    rerank_ok = res.mean_reranks <= walk.rerank_bound + 3 * res.se_reranks
    late_ok = res.late_rerank_free >= 0.9
    ok = share_ok and rerank_ok and late_ok and elapsed < 120
    acceptance_report(
        6,
        "two-item walk",
        ok,
        f"pi1={res.pi1:.4f} (p={walk.p:.4f}), reranks {res.mean_reranks:.2f} vs bound "
        f"{walk.rerank_bound:.4f}+3*{res.se_reranks:.3f}, late rerank-free share {res.late_rerank_free:.2f} "
        f"in {elapsed:.1f}s",
    )
    assert ok


def test_lock_in(acceptance_report, out_dir):
    start = time.perf_counter()
    res = lock_in_experiment(n_items=10, horizon=5000, seeds=range(100))
    elapsed = time.perf_counter() - start
    (out_dir / "lock_in.json").write_text(json.dumps(res.to_dict(), indent=2))
    ok = res.distinct_top_items >= 2 and res.lucky >= 0.05 and res.unlucky >= 0.05 and elapsed < 300
    acceptance_report(
        7,
        "quality-independent lock-in",
        ok,
        f"{res.distinct_top_items} distinct top items, lucky {res.lucky:.2f}, unlucky {res.unlucky:.2f}, "
        f"frozen {res.frozen:.2f} in {elapsed:.0f}s",
    )
    assert ok


def _regret_ratio(summary):
    return summary["last_window_increment"] / summary["first_window_increment"]


def test_learning_ranker_regret(acceptance_report, out_dir):
    start = time.perf_counter()
    summaries = {}
    for name in ("qp", "greedy", "oblivious"):
        cfg = ExperimentConfig()
        cfg.ranker.name = name
        records = run_experiment(cfg)
        emit_results(records, out_dir / f"regret_practical_{name}", metadata={"config": cfg.to_dict()})
        summaries[name] = summarize(records)
    elapsed = time.perf_counter() - start

    theory = {}
    for name in ("qp", "greedy", "oblivious"):
        cfg = ExperimentConfig()
        cfg.ranker.name = name
        cfg.ranker.profile = "theory"
        records = run_experiment(cfg)
        emit_results(records, out_dir / f"regret_theory_{name}", metadata={"config": cfg.to_dict()})
        theory[name] = summarize(records)
    (out_dir / "regret_summary.json").write_text(json.dumps({"practical": summaries, "theory": theory}, indent=2))

    final = {k: v["mean_final_regret"] for k, v in summaries.items()}
    ratio = {k: _regret_ratio(v) for k, v in summaries.items()}
    checks = {
        "qp<greedy": final["qp"] < final["greedy"],
        "qp<oblivious": final["qp"] < final["oblivious"],
        "qp ratio<=0.5": ratio["qp"] <= 0.5,
        "greedy ratio>=0.8": ratio["greedy"] >= 0.8,
        "oblivious ratio>=0.8": ratio["oblivious"] >= 0.8,
        "runtime<600s": elapsed < 600,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    acceptance_report(
        8,
        "learning-ranker regret",
        ok,
        "final regret "
        + ", ".join(f"{k}={final[k]:.1f}" for k in final)
        + "; last/first increment "
        + ", ".join(f"{k}={ratio[k]:.2f}" for k in ratio)
        + f"; theory-profile final regret "
        + ", ".join(f"{k}={theory[k]['mean_final_regret']:.1f}" for k in theory)
        + f"; {elapsed:.0f}s"
        + (f"; failed: {failed}" if failed else ""),
    )
    assert ok


def test_parameter_sweeps(acceptance_report, out_dir):
    start = time.perf_counter()
    cfg = ExperimentConfig()
    b_rows = sweep(cfg, "b_max", [0.05, 0.1, 0.2])
    b = [row.final_window for row in b_rows]
    reported = {"b_max": [row.to_dict() for row in b_rows]}

    short = cfg.replace(horizon=2000, seeds=list(range(5)))
    reported["alpha_min"] = [row.to_dict() for row in sweep(short, "alpha_min", [0.01, 0.02, 0.05])]
    reported["M"] = [row.to_dict() for row in sweep(short, "M", [2, 3, 4])]
    elapsed = time.perf_counter() - start
    (out_dir / "sweeps.json").write_text(json.dumps(reported, indent=2))

    ok = b[0] <= b[1] <= b[2] and b[0] < b[2]
    report_alpha = ", ".join(f"{r['value']}:{r['final_window']:.4f}" for r in reported["alpha_min"])
    report_m = ", ".join(f"{int(r['value'])}:{r['final_window']:.4f}" for r in reported["M"])
    acceptance_report(
        9,
        "sweep directions",
        ok,
        "final-window regret by b_max "
        + ", ".join(f"{v}:{x:.4f}" for v, x in zip((0.05, 0.1, 0.2), b))
        + f"; alpha_min (reported) {report_alpha}; M (reported) {report_m}; {elapsed:.0f}s",
    )
    assert ok


def test_determinism(acceptance_report, tmp_path):
    cfg = ExperimentConfig(horizon=500, seeds=[0, 7])
    paths = []
    for name in ("first", "second"):
        emit_results(run_experiment(cfg), tmp_path / name)
        paths.append(tmp_path / name / "runs.csv")
    same = paths[0].read_bytes() == paths[1].read_bytes()
    acceptance_report(10, "determinism", same, f"runs.csv byte-identical across repeats: {same}")
    assert same
