"""End-to-end acceptance checks, one test per criterion.

Experiment sweeps cache their finished cells per seed under
``$PACBOUND_ACCEPTANCE_CACHE`` (default ``.acceptance-cache`` in the repo
root); cells are keyed by config hash, so a cached cell is the same
computation a fresh run would do. Delete the directory to recompute.
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from pacbound.bounds import BoundConfig, eta_g1, phi1, phi2_meta, privacy_transform
from pacbound.bounds.exact import exact_gibbs_risk, exact_phi1, exact_phi1a, exact_phi2, exact_phi2b
from pacbound.calculus import (ProgramSpec, Statement, exact_distribution_oracle, force, max_level, run_to_value,
                               sample, sample_many, thunk)
from pacbound.harness import ExperimentConfig, run_experiment
from pacbound.mass import MassFunction, normalize, tv_distance

import fixtures
import gradcheck

CACHE = Path(os.environ.get("PACBOUND_ACCEPTANCE_CACHE", Path(__file__).resolve().parents[1] / ".acceptance-cache"))
RESULTS: dict = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (ok, detail)
    assert ok, detail


@pytest.fixture(scope="module", autouse=True)
def summary_lines(request):
    yield
    tr = request.config.pluginmanager.getplugin("terminalreporter")
    lines = [f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}" for n, (ok, detail) in sorted(RESULTS.items())]
    for line in lines:
        if tr is not None:
            tr.write_line(line)
        else:
            print(line)


def run_seed(kind: str, seed: int, **overrides):
    cfg = ExperimentConfig.from_json({"kind": kind, "seeds": [seed], **overrides})
    return run_experiment(cfg, CACHE / kind / f"seed{seed}")


# -- 1: calculus ------------------------------------------------------------------

def random_program(rng) -> ProgramSpec:
    n_stmt = int(rng.integers(1, 5))
    sources = []
    stmts = []
    for k in range(n_stmt):
        if sources and rng.random() < 0.3:
            # reuse an earlier statement's source, level and label: a memoized draw
            prev = stmts[int(rng.integers(len(stmts)))]
            stmts.append(Statement(f"v{k}", prev.source, prev.level, prev.label))
            continue
        size = int(rng.integers(1, 6))
        support = tuple(int(v) for v in rng.choice(10, size=size, replace=False))
        src = normalize(dict(zip(support, rng.dirichlet(np.ones(size)))))
        sources.append(src)
        stmts.append(Statement(f"v{k}", src, int(rng.integers(1, 3)), f"l{k}"))
    weights = rng.integers(1, 4, size=n_stmt)
    modulus = int(rng.integers(3, 12))

    def body(**vals):
        return int(sum(w * vals[f"v{i}"] for i, w in enumerate(weights)) % modulus)

    return ProgramSpec(tuple(stmts), body)


def test_criterion_1_calculus_oracle_equivalence():
    start = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    exact_ok = True
    for i in range(50):
        spec = random_program(rng)
        term = spec.to_term()
        oracle = exact_distribution_oracle(spec)
        dist = force(term)
        if max_level(term) == 1:
            dist_one = thunk(term)
            worst = max(worst, tv_distance(dist_one, oracle))
        emp = normalize(dict(sample_many(term, 100_000, seed=i)))
        worst = max(worst, tv_distance(dist, oracle), tv_distance(emp, oracle), tv_distance(emp, dist))
        # round trips on a statement source
        p = spec.statements[0].source
        exact_ok &= thunk(sample(p)) == p
        exact_ok &= force(sample(thunk(sample(p)))) == p
        exact_ok &= run_to_value(sample(p), seed=i) in p.support
    elapsed = time.time() - start
    record(1, worst <= 0.02 and exact_ok and elapsed < 60,
           f"max TV {worst:.4f} (<= 0.02), round trips exact {exact_ok}, {elapsed:.0f}s (< 60s)")


# -- 2: gradients ---------------------------------------------------------------------

def test_criterion_2_gradient_suite():
    start = time.time()
    errs = {name: gradcheck.sweep(name, n_points=50) for name in sorted(gradcheck.CASES)}
    elapsed = time.time() - start
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    record(2, worst <= 1e-3 and elapsed < 300, f"max rel err {worst:.1e} (<= 1e-3) [{detail}], {elapsed:.0f}s")


# -- 3: ordering on exact fixtures ----------------------------------------------------------

def test_criterion_3_bound_ordering():
    cfg = BoundConfig()
    margins = []
    for seed in range(20):
        rho, pi, X, y = fixtures.single_task(seed)
        a = exact_phi1a(rho, pi, X, y, cfg).total
        b = exact_phi1(rho, pi, X, y, cfg).total
        margins += [a - b, b - exact_gibbs_risk(rho, X, y)]
        f2, f2_pi, posts, tasks = fixtures.meta(seed)
        margins.append(exact_phi2b(f2, f2_pi, posts, tasks, cfg).total - exact_phi2(f2, f2_pi, posts, tasks, cfg).total)
    low = min(margins)
    record(3, low >= -1e-6, f"min margin {low:.2e} (>= -1e-6) over 20 single-task and 20 meta fixtures")


# -- 4: validity -------------------------------------------------------------------------------

def test_criterion_4_validity_frequency():
    start = time.time()
    rep = run_seed("validity-frequency", 0)
    elapsed = time.time() - start
    s = rep.summary
    record(4, not rep.failures and s["draws"] == 200 and s["violation_rate"] <= 0.10,
           f"violation rate {s['violation_rate']:.3f} (<= 0.10) over {s['draws']} draws, {elapsed:.0f}s")


# -- 5: single task ---------------------------------------------------------------------------

def test_criterion_5_single_task_replication():
    reps = [run_seed("single-task-compare", s) for s in (0, 1, 2)]
    assert all(not r.failures for r in reps)
    r2o = float(np.mean([r.summary["phi2o"]["r_mean"] for r in reps]))
    r1a = float(np.mean([r.summary["phi1a"]["r_mean"] for r in reps]))
    record(5, r2o > r1a and r2o > 0.25,
           f"corr(2o, test) {r2o:.3f} > corr(phi1a, test) {r1a:.3f} and > 0.25, 3 seeds x 60 networks")


# -- 6: meta-learning ----------------------------------------------------------------------------

def test_criterion_6_meta_replication():
    reps = [run_seed("meta-compare", s) for s in (0, 1, 2)]
    assert all(not r.failures for r in reps)
    r_ml = float(np.mean([r.summary["ml"]["r_mean"] for r in reps]))
    r_single = float(np.mean([r.summary["single"]["r_mean"] for r in reps]))
    dpp = float(np.mean([x["dpp_accuracy"] for r in reps for x in r.records]))
    gauss = float(np.mean([x["gauss_accuracy"] for r in reps for x in r.records]))
    record(6, r_ml > r_single and dpp >= gauss - 0.01,
           f"corr(meta, test) {r_ml:.3f} vs corr(single, test) {r_single:.3f}; "
           f"accuracy meta {dpp:.3f} vs Gaussian baseline {gauss:.3f} (need >= baseline - 0.01)")


# -- 7: model selection ----------------------------------------------------------------------------

def test_criterion_7_model_selection():
    reps = [run_seed("model-select", s) for s in range(20)]
    assert all(not r.failures for r in reps)
    top3, e2o, e1a = [], [], []
    for r in reps:
        chosen = [x for x in r.records if x["selected_2o"]][0]
        chosen_a = [x for x in r.records if x["selected_phi1a"]][0]
        top3.append(chosen["true_rank"] <= 3)
        e2o.append(chosen["test_error"])
        e1a.append(chosen_a["test_error"])
    frac, m2o, m1a = float(np.mean(top3)), float(np.mean(e2o)), float(np.mean(e1a))
    record(7, frac >= 0.6 and m2o < m1a,
           f"2o pick in true top 3 in {frac:.2f} of 20 trials (>= 0.60); mean test error {m2o:.3f} vs phi1a {m1a:.3f}")


# -- 8: closed forms --------------------------------------------------------------------------------

def test_criterion_8_closed_forms():
    cfg = BoundConfig()
    v1 = phi1(0.0, 0.0, cfg.with_(n=100)).total
    v2 = eta_g1(0.0, cfg.with_(n_aux=20))
    pt = privacy_transform(MassFunction(("a", "b"), (0.8, 0.2)), 2.0).as_dict()
    v4 = phi2_meta(0.0, [0.0, 0.0], [0.0, 0.0], [15, 15], cfg.with_(meta_constants="main")).total
    v4_ref = math.sqrt(math.log(2 * 2 * 15 / 0.05) / 28) + math.sqrt(math.log(2 * 2 / 0.05) / 2)
    ok = (abs(v1 - 0.3996) <= 1e-4 and abs(v2 - 0.7996) <= 1e-4 and abs(pt["a"] - 0.9412) <= 1e-4
          and abs(pt["b"] - 0.0588) <= 1e-4 and abs(v4 - v4_ref) <= 1e-12)
    record(8, ok, f"phi1 {v1:.4f}, eta {v2:.4f}, tempered {{{pt['a']:.4f}, {pt['b']:.4f}}}, meta constants {v4:.6f}")
