import csv
import json
import math

import numpy as np
import pytest
from scipy import stats

from pacbound.bounds import ConfigError
from pacbound.cli import main
from pacbound.harness import (ExperimentConfig, ExperimentReport, RankDeficiencyError, emit_plot_data,
                              nested_f_test, pearson_r, render_figures, run_experiment, t_test_one_tailed)

TINY = {"kind": "single-task-compare", "seed": 0,
        "dataset": {"n_datasets": 2, "noise_levels": [0.0, 0.4]},
        "train": {"epochs": 3, "tau_grid": [0.5], "g_epochs": 3, "g_pool": 16, "n_ent": 2, "eval_mc": 16},
        "options": {"eval_mc": 20, "n_aux": 5}}


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# -- statistics ------------------------------------------------------------------

def test_pearson_examples():
    xs = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    assert pearson_r(xs, 2 * xs + 1)[0] == pytest.approx(1.0)
    assert pearson_r(xs, -xs)[0] == pytest.approx(-1.0)
    assert pearson_r([1, 2, 3, 4], [1, 3, 2, 4])[0] == pytest.approx(0.8, abs=1e-6)
    with pytest.raises(ValueError):
        pearson_r([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson_r([1, 2], [1, 2])


def test_f_test_examples():
    rng = np.random.default_rng(0)
    x = rng.normal(size=30)
    y = 2 * x + rng.normal(size=30)
    assert nested_f_test(y, x, np.column_stack([x, x])) == (0.0, 1.0)
    base = np.column_stack([np.ones(30), x])
    resid = y - base @ np.linalg.lstsq(base, y, rcond=None)[0]
    assert nested_f_test(y, x, np.column_stack([x, resid]))[1] < 0.01
    F, p = nested_f_test(3 * x + 1, None, x)
    assert F > 1e6 and p < 1e-10
    with pytest.raises(RankDeficiencyError):
        nested_f_test(y, np.column_stack([x, x]), np.column_stack([x, x, resid]))


def test_t_test_examples():
    a = np.array([0.5, 0.6, 0.7])
    assert t_test_one_tailed(a, a) == (0.0, 0.5)
    assert t_test_one_tailed(a, a, paired=True) == (0.0, 0.5)
    b = a + 10 + np.array([1e-3, -1e-3, 0.0])
    assert t_test_one_tailed(a, b)[1] < 1e-4
    # pooled variance 4.9, standard error 1.4, so t = -1.6 / 1.4
    t, p = t_test_one_tailed([1, 2, 3, 4, 5], [2, 3, 4, 5, 9])
    assert t == pytest.approx(-8 / 7, abs=1e-3)
    # t table, 8 degrees of freedom: P(T < -1.108) = 0.15 and P(T < -1.397) = 0.10
    assert 0.10 < p < 0.15
    with pytest.raises(ValueError):
        t_test_one_tailed([1.0], [2.0, 3.0])
    with pytest.raises(ValueError):
        t_test_one_tailed([1.0, 2.0], [1.0, 2.0, 3.0], paired=True)


def test_statistics_match_reference_on_random_fixtures():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(8, 40))
        x, z = rng.normal(size=n), rng.normal(size=n)
        y = 0.5 * x + 0.3 * z + rng.normal(size=n)
        r, p2, _ = pearson_r(x, y)
        ref = stats.pearsonr(x, y)
        assert r == pytest.approx(ref.statistic, abs=1e-6) and p2 == pytest.approx(ref.pvalue, abs=1e-6)
        # F from explicit normal equations
        A = np.column_stack([np.ones(n), x])
        B = np.column_stack([A, z])
        rss = lambda M: float(np.sum((y - M @ np.linalg.solve(M.T @ M, M.T @ y)) ** 2))
        F_ref = (rss(A) - rss(B)) / (rss(B) / (n - 3))
        assert nested_f_test(y, x, np.column_stack([x, z]))[0] == pytest.approx(F_ref, abs=1e-6)
        a, b = rng.normal(size=n), rng.normal(0.3, 1.0, size=n + 3)
        sp = ((n - 1) * a.var(ddof=1) + (n + 2) * b.var(ddof=1)) / (2 * n + 1)
        t_ref = (a.mean() - b.mean()) / math.sqrt(sp * (1 / n + 1 / (n + 3)))
        t, p = t_test_one_tailed(a, b)
        assert t == pytest.approx(t_ref, abs=1e-6)
        assert p == pytest.approx(stats.t.cdf(t_ref, 2 * n + 1), abs=1e-6)
        d = a - rng.normal(size=n)
        tp, _ = t_test_one_tailed(a, a - d, paired=True)
        assert tp == pytest.approx(d.mean() / (d.std(ddof=1) / math.sqrt(n)), abs=1e-6)


# -- configs ---------------------------------------------------------------------

def test_config_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json({"kind": "nope", "seed": 0})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json({"kind": "transfer"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json({"kind": "transfer", "seeds": [1, 1]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json({"kind": "transfer", "seed": 0, "options": {"bogus": 1}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json({"kind": "transfer", "seed": 0, "train": {"bogus": 1}})
    cfg = ExperimentConfig.from_json({"kind": "transfer", "seed": 3, "n_seeds": 2})
    assert cfg.seeds == [3, 4]
    assert cfg.hash == ExperimentConfig.from_json(cfg.to_json()).hash


# -- experiments -------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    return run_experiment(ExperimentConfig.from_json(TINY), out), out


def test_experiment_record_count_and_outputs(tiny_run):
    report, out = tiny_run
    assert report.failures == []
    assert len(report.records) == report.cells_requested == 4
    assert {"phi1a", "phi2o", "test_error_phi1a", "test_error_2o"} <= set(report.records[0])
    back = ExperimentReport.load(out)
    assert back.config_hash == report.config_hash and len(back.records) == 4
    assert len(_rows(out / "records.csv")) == 4


def test_experiment_rerun_identical(tiny_run):
    report, _ = tiny_run
    again = run_experiment(ExperimentConfig.from_json(TINY))
    assert json.dumps(again.to_json(), sort_keys=True) == json.dumps(report.to_json(), sort_keys=True)


def test_plot_data_invariants(tiny_run, tmp_path):
    report, _ = tiny_run
    paths = emit_plot_data(report, tmp_path)
    for name in ("phi1a", "phi2o"):
        assert len(_rows(paths[f"scatter_{name}"])) == len(report.records)
        ranks = _rows(paths[f"rank_{name}"])
        for g in {r["group"] for r in ranks}:
            rs = [r for r in ranks if r["group"] == g]
            assert np.mean([float(r["normalized_bound"]) for r in rs]) == pytest.approx(1.0)
            errs = [float(r["test_error"]) for r in rs]
            assert errs == sorted(errs)
            assert [int(r["rank"]) for r in rs] == list(range(1, len(rs) + 1))
        assert _rows(paths[f"quartiles_{name}"])


def test_render_figures(tiny_run, tmp_path):
    files = render_figures(tiny_run[0], tmp_path)
    assert files and all(p.suffix == ".png" and p.stat().st_size > 0 for p in files)


# -- command line ------------------------------------------------------------------

def test_cli_report_with_figures(tiny_run, tmp_path, capsys):
    _, src = tiny_run
    assert main(["report", "--in", str(src), "--out", str(tmp_path), "--figures"]) == 0
    printed = capsys.readouterr().out
    assert "scatter_phi1a.csv" in printed and "scatter_phi1a.png" in printed
    assert (tmp_path / "scatter_phi1a.png").stat().st_size > 0
    assert (tmp_path / "rank_phi2o.csv").exists()


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["report", "--in", str(tmp_path / "missing")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["experiment", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    broken = dict(TINY, dataset={"path": str(tmp_path / "no-suite"), "n_datasets": 1, "noise_levels": [0.0]})
    cfg = tmp_path / "broken.json"
    cfg.write_text(json.dumps(broken))
    assert main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_cli_gen_data_and_closed_form_bounds(tmp_path, capsys):
    assert main(["gen-data", "--suite", "clusters", "--seed", "0", "--out", str(tmp_path / "c"),
                 "--noise-levels", "0"]) == 0
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert len(manifest["tasks"]) == 33
    cfg = tmp_path / "phi1.json"
    cfg.write_text(json.dumps({"risk": 0.0, "kl": 0.0, "n": 100}))
    capsys.readouterr()
    assert main(["bound", "--kind", "phi1", "--config", str(cfg)]) == 0
    assert json.loads(capsys.readouterr().out)["total"] == pytest.approx(0.3996, abs=1e-4)
    cfg.write_text(json.dumps({"kl_hyper": 0.0, "task_kls": [0, 0], "task_risks": [0, 0], "task_sizes": [15, 15],
                               "bound": {"meta_constants": "main"}}))
    assert main(["bound", "--kind", "phi2", "--config", str(cfg)]) == 0
    expected = math.sqrt(math.log(1200) / 28) + math.sqrt(math.log(80) / 2)
    assert json.loads(capsys.readouterr().out)["total"] == pytest.approx(expected)
    cfg.write_text(json.dumps({"kl": 0.0}))
    assert main(["bound", "--kind", "phi1", "--config", str(cfg)]) == 2


def test_cli_train_elbo(tmp_path, capsys):
    from pacbound.data import LabeledDataset, save_csv

    rng = np.random.default_rng(0)
    X = rng.normal(size=(12, 2))
    save_csv(LabeledDataset(X, (X[:, 0] > 0).astype(int)), tmp_path / "train.csv")
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"task": "elbo", "seed": 1, "data": {"train": "train.csv"}, "train": {"epochs": 4},
                               "out": "run"}))
    assert main(["train", "--config", str(cfg)]) == 0
    assert (tmp_path / "run" / "model.json").exists()
    assert len((tmp_path / "run" / "trace.jsonl").read_text().splitlines()) == 4
