import numpy as np
import pytest

from pacbound.bounds import AuxiliarySample, BoundConfig, ConfigError, risk_tau
from pacbound.bounds.second_order import build_aux_sample
from pacbound.models import Arch, StochasticClassifier, predict_prob
from pacbound.training import (TrainConfig, TrainTrace, checksum, elbo_pretrain, joint_private_train, model_select,
                               moving_average, optimize_2o, train_g, train_meta, train_phi1a)

SMALL = Arch(base=(2, 3, 1), hyper_hidden=(3,), d=2)
BCFG = BoundConfig()
X4 = np.array([[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]])
Y4 = np.array([0, 0, 1, 1])


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=-1)
    with pytest.raises(ConfigError):
        TrainConfig(n_mc=0)


def test_elbo_separable_reaches_full_accuracy():
    f1, trace, _ = elbo_pretrain(X4, Y4, Arch(base=(2, 5, 5, 1)), TrainConfig(epochs=500, lr=0.02))
    assert len(trace.records) == 500
    acc = np.mean((predict_prob(f1, X4, n_mc=500, seed=0) > 0.5) == Y4)
    assert acc == 1.0


def test_elbo_zero_epochs_and_determinism():
    init = StochasticClassifier.init(SMALL, seed=3)
    f1, trace, _ = elbo_pretrain(X4, Y4, SMALL, TrainConfig(epochs=0), init=init)
    assert np.array_equal(f1.theta1, init.theta1)
    assert trace.records == []
    cfg = TrainConfig(epochs=15, seed=7)
    a = elbo_pretrain(X4, Y4, SMALL, cfg)[1]
    b = elbo_pretrain(X4, Y4, SMALL, cfg)[1]
    assert a.to_jsonl() == b.to_jsonl()
    with pytest.raises(ConfigError):
        elbo_pretrain(np.zeros((0, 2)), np.zeros(0), SMALL, cfg)


def test_trace_round_trip(tmp_path):
    trace = elbo_pretrain(X4, Y4, SMALL, TrainConfig(epochs=5))[1]
    trace.save(tmp_path / "t.jsonl")
    back = TrainTrace.load(tmp_path / "t.jsonl")
    assert back.records == trace.records and back.steps == 5


def test_moving_average():
    assert moving_average([1, 2, 3], 10).tolist() == [1, 2, 3]
    assert moving_average(np.arange(12.0), 10).tolist() == pytest.approx([4.5, 5.5, 6.5])


def _noisy(seed, n=30):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    y = ((X[:, 0] + 0.5 * rng.normal(size=n)) > 0).astype(int)
    return X, y


def test_train_phi1a_frozen_prior_and_progress():
    decreasing = 0
    for seed in range(10):
        X, y = _noisy(seed)
        prior = StochasticClassifier.init(SMALL, seed=100 + seed)
        before = checksum(prior.theta1)
        _, report, trace, _ = train_phi1a(X, y, prior, TrainConfig(epochs=40, lr=0.02, seed=seed, n_ent=4), BCFG)
        assert checksum(prior.theta1) == before
        assert trace.info["prior_checksum"] == before
        assert np.isfinite(report.total)
        ma = moving_average(trace.objectives, 10)
        decreasing += ma[-1] < ma[0]
    assert decreasing >= 9


def test_train_phi1a_deterministic():
    X, y = _noisy(0)
    prior = StochasticClassifier.init(SMALL, seed=1)
    cfg = TrainConfig(epochs=5, seed=2, n_ent=4, eval_mc=32)
    a = train_phi1a(X, y, prior, cfg, BCFG)
    b = train_phi1a(X, y, prior, cfg, BCFG)
    assert a[2].to_jsonl() == b[2].to_jsonl()
    assert a[1].total == b[1].total


def test_train_meta_identical_tasks_agree():
    X, y = _noisy(5, n=15)
    res = train_meta([(X, y)] * 3, SMALL, TrainConfig(epochs=30, lr=0.02, n_ent=2), BCFG, group_size=3)
    assert len(res.trace.records) == 30 and res.trace.steps == 30
    probe = np.random.default_rng(0).normal(size=(50, 2))
    preds = [predict_prob(p, probe, n_mc=400, seed=1) for p in res.posteriors]
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.mean(np.abs(preds[i] - preds[j])) < 0.1
    assert np.isfinite(res.report.total)


def test_train_meta_needs_two_tasks():
    with pytest.raises(ConfigError):
        train_meta([_noisy(0)], SMALL, TrainConfig(epochs=1), BCFG)


def _aux_sets(X, y, k=20, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(k):
        idx = rng.integers(0, len(y), len(y))
        out.append((X[idx], y[idx]))
    return out


def test_optimize_2o_grid_one():
    X, y = _noisy(1, n=20)
    f1 = StochasticClassifier.init(SMALL, seed=0)
    res = optimize_2o(f1, X, y, _aux_sets(X, y), TrainConfig(tau_grid=(1.0,)), BCFG, n_mc=500)
    assert res.tau == 1.0
    assert res.report.terms["tau"] == 1.0
    assert res.report.total == pytest.approx(res.report.terms["empirical_risk"] + 1.0)
    with pytest.raises(ConfigError):
        optimize_2o(f1, X, y, _aux_sets(X, y), TrainConfig(tau_grid=()), BCFG)


def test_train_g_learns_separating_feature():
    rng = np.random.default_rng(0)
    feats = rng.uniform(0.1, 1.0, size=(20, 6))
    gaps = (rng.random(20) < 0.5).astype(float)
    feats[:, 0] = np.where(gaps > 0, 400.0, 0.01)
    aux = AuxiliarySample(feats, gaps.astype(int), 0.5, gaps)
    pool = rng.uniform(-1, 1, size=(64, 6))
    # a large lambda makes weight noise cheap to remove; at lambda=10 the optimum stays noisy
    g, trace = train_g(aux, pool, 0.5, TrainConfig(g_epochs=300), BCFG.with_(lam=100.0))
    assert len(trace.records) == 300
    assert risk_tau(g, aux, n_mc=2000, seed=1) < 0.05


def test_train_g_all_zero_labels():
    rng = np.random.default_rng(1)
    feats = rng.uniform(0.1, 1.0, size=(20, 6))
    aux = AuxiliarySample(feats, np.zeros(20, dtype=int), 0.5, np.zeros(20))
    g, _ = train_g(aux, rng.uniform(-1, 1, size=(64, 6)), 0.5, TrainConfig(g_epochs=150), BCFG)
    assert risk_tau(g, aux, n_mc=2000, seed=2) < 0.05


def test_model_select_trivial_cases():
    X, y = _noisy(2, n=20)
    f1 = StochasticClassifier.init(SMALL, seed=0)
    cfg = TrainConfig(tau_grid=(0.5,), g_epochs=20)
    idx, results = model_select([f1], X, y, _aux_sets(X, y), cfg, BCFG, n_mc=500)
    assert idx == 0 and len(results) == 1
    idx, results = model_select([f1, f1], X, y, _aux_sets(X, y), cfg, BCFG, n_mc=2000)
    assert idx in (0, 1)
    a, b = (r.report for r in results)
    assert abs(a.total - b.total) < 4 * (a.terms["p1_se"] + b.terms["p1_se"]) + 0.05


def test_joint_private_train():
    X, y = _noisy(3, n=20)
    with pytest.raises(ConfigError):
        joint_private_train(X, y, _aux_sets(X, y), SMALL, 0.0, TrainConfig(), BCFG)
    cfg = TrainConfig(epochs=5, tau_grid=(0.5,), g_epochs=10, g_pool=40)
    res = joint_private_train(X, y, _aux_sets(X, y), SMALL, 1.0, cfg, BCFG)
    assert res.trace.steps == 10
    assert np.isfinite(res.report.total)


def test_aux_sample_from_classifier_has_valid_labels():
    X, y = _noisy(4, n=10)
    f1 = StochasticClassifier.init(SMALL, seed=0)
    aux = build_aux_sample(f1, X, y, _aux_sets(X, y, 20), 0.2, seed=0)
    assert aux.features.shape == (20, 6)
    assert set(np.unique(aux.labels)) <= {0, 1}
    assert np.all(aux.labels == (aux.gaps > 0.2))
