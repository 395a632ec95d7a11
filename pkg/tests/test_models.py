import math

import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss

from pacbound.calculus import ProgramSpec, Statement, exact_distribution_oracle
from pacbound.discrete import TableClassifier
from pacbound.mass import MassFunction
from pacbound.models import (Arch, DeterministicClassifier, GaussianClassifier, HyperModel, StochasticClassifier,
                             conditional_loglik, extract_g_features, gaussian_kl, load_model, predict_prob,
                             sample_classifier, sample_hyper, save_model)
from pacbound.nn import MlpParams

ARCH = Arch(base=(2, 5, 5, 1))


def constant_f1(bias, sigma=0.0):
    arch = Arch(base=(2, 5, 5, 1), sigma=sigma)
    hyper = MlpParams.zeros(arch.hyper)
    hyper.biases[-1] = np.asarray(bias, dtype=float)
    return StochasticClassifier(arch, hyper.flat())


def test_sample_classifier_constant_hypernet():
    b = np.random.default_rng(0).normal(size=ARCH.p0)
    f0 = sample_classifier(constant_f1(b), seed=4)
    assert np.array_equal(f0.theta, b)


def test_sample_classifier_mean_matches_quadrature():
    f1 = StochasticClassifier.init(ARCH, seed=1, spread=0.5)
    nodes, weights = hermegauss(20)
    weights = weights / weights.sum()
    z = np.array([(a, b) for a in nodes for b in nodes])
    w = np.array([wa * wb for wa in weights for wb in weights])
    exact = (w[:, None] * f1.mean_theta0(z)).sum(axis=0)
    draws = f1.sample_theta0(10_000, seed=2)
    se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    assert np.mean(np.abs(draws.mean(axis=0) - exact) <= 3 * se) >= 0.95


def test_sample_classifier_seeds_differ():
    f1 = StochasticClassifier.init(ARCH, seed=1)
    assert not np.array_equal(sample_classifier(f1, 1).theta, sample_classifier(f1, 2).theta)


def test_predict_prob_examples():
    X = np.random.default_rng(0).normal(size=(5, 2))
    b = np.random.default_rng(1).normal(size=ARCH.p0)
    f1 = constant_f1(b)
    f0 = DeterministicClassifier(b, ARCH.base)
    assert predict_prob(f1, X, n_mc=3, seed=0) == pytest.approx(f0.prob1(X))
    mix = MassFunction((TableClassifier((1.0, 1.0)), TableClassifier((0.0, 0.0))), (0.5, 0.5))
    assert predict_prob(mix, [0, 1], n_mc=20_000, seed=0) == pytest.approx([0.5, 0.5], abs=0.02)
    assert predict_prob(mix, [0, 1], n_mc=None) == pytest.approx([0.5, 0.5])


def test_predict_prob_matches_oracle_on_discrete_fixture():
    tables = (TableClassifier((0.9, 0.2, 0.5)), TableClassifier((0.1, 0.6, 0.3)), TableClassifier((0.4, 0.4, 1.0)))
    f1 = MassFunction(tables, (0.2, 0.5, 0.3))
    mc = predict_prob(f1, [0, 1, 2], n_mc=100_000, seed=7)
    for x in range(3):
        dist = exact_distribution_oracle(ProgramSpec((Statement("c", f1),), lambda c, x=x: c.probs[x]))
        exact = dist.expect(lambda v: v)
        assert abs(mc[x] - exact) < 0.02


def test_conditional_loglik_examples():
    X = np.zeros((1, 2))
    half = constant_f1(np.zeros(ARCH.p0))
    assert conditional_loglik(half, X, [1], np.zeros(2))[0, 0] == pytest.approx(math.log(0.5))
    b = np.zeros(ARCH.p0)
    b[-1] = math.log(99.0)
    sure = constant_f1(b)
    assert conditional_loglik(sure, X, [1], np.zeros(2))[0, 0] == pytest.approx(math.log(0.99))


def test_conditional_loglik_averages_to_predict_prob():
    f1 = StochasticClassifier.init(ARCH, seed=3, spread=1.0)
    X = np.array([[0.3, -0.2]])
    gammas = np.random.default_rng(4).standard_normal((20_000, 2))
    mc = np.exp(conditional_loglik(f1, X, [1], gammas, seed=5)).mean()
    assert mc == pytest.approx(predict_prob(f1, X, 20_000, seed=6)[0], abs=0.01)


def test_sample_hyper_examples():
    arch = ARCH
    f2 = HyperModel.init(arch, seed=0, sigma2=0.0)
    f2.theta2[:] = 0.0
    hh = MlpParams.zeros(f2.hh_sizes)
    fixed = np.random.default_rng(1).normal(size=arch.p1)
    hh.biases[-1] = fixed
    f2 = HyperModel(arch, hh.flat(), f2.hh_hidden, 0.0)
    assert np.array_equal(sample_hyper(f2, 1).theta1, fixed)
    noisy = HyperModel.init(arch, seed=0)
    assert not np.array_equal(sample_hyper(noisy, 1).theta1, sample_hyper(noisy, 2).theta1)


def test_sample_hyper_nested_mean():
    f2 = HyperModel.init(ARCH, seed=2, spread=0.5)
    rng = np.random.default_rng(3)
    direct = np.array([sample_hyper(f2, rng).sample_theta0(1, rng)[0] for _ in range(4000)])
    th1 = f2.sample_theta1(400, seed=9)
    nested = np.concatenate([StochasticClassifier(ARCH, t).sample_theta0(25, seed=10 + i)
                             for i, t in enumerate(th1)])
    se = np.sqrt(direct.var(axis=0) / len(direct) + nested.var(axis=0) / 400)
    assert np.mean(np.abs(direct.mean(axis=0) - nested.mean(axis=0)) <= 3 * se) > 0.97


def test_extract_g_features_examples():
    X = np.random.default_rng(0).normal(size=(6, 2))
    y = np.array([0, 1, 0, 1, 1, 0])
    half = DeterministicClassifier(np.zeros(ARCH.p0), ARCH.base)
    feats = extract_g_features(half, X, y)
    assert (feats.l1, feats.l2, feats.path_norm) == (0.0, 0.0, 0.0)
    assert feats.likelihood == pytest.approx(0.5)
    assert feats.loglik == pytest.approx(math.log(0.5))
    assert feats.entropy == pytest.approx(math.log(2))


def test_extract_g_features_hand_computed():
    # logistic unit p(y=1|x) = sigmoid(2x) on four points
    f0 = DeterministicClassifier(np.array([2.0, 0.0]), (1, 1))
    X = np.array([[-1.0], [0.0], [1.0], [2.0]])
    y = np.array([0, 1, 1, 1])
    q = [1 / (1 + math.exp(-2 * x)) for x in (-1.0, 0.0, 1.0, 2.0)]
    p_true = [1 - q[0], q[1], q[2], q[3]]
    loglik = sum(math.log(p) for p in p_true) / 4
    ent = sum(-(v * math.log(v) + (1 - v) * math.log(1 - v)) for v in q) / 4
    expected = [2.0, 2.0, math.exp(loglik), loglik, ent, 2.0]
    assert extract_g_features(f0, X, y).as_array() == pytest.approx(expected)


def test_gaussian_kl_examples():
    sizes = (1, 1)
    q = GaussianClassifier(np.array([0.3, -0.1]), np.zeros(2), sizes)
    assert gaussian_kl(q, q) == 0.0
    mu = np.array([1.0, 2.0])
    shifted = GaussianClassifier(mu, np.zeros(2), sizes)
    assert gaussian_kl(shifted, GaussianClassifier.standard(sizes)) == pytest.approx(0.5 * (mu @ mu))
    a = GaussianClassifier(np.zeros(2), np.array([0.0, 0.0]), sizes)
    b = GaussianClassifier(np.zeros(2), np.array([0.5 * math.log(2), 0.0]), sizes)
    assert gaussian_kl(a, b) == pytest.approx(0.5 * (0.5 - 1 + math.log(2)), abs=1e-12)
    assert gaussian_kl(a, b) == pytest.approx(0.0966, abs=1e-4)


def test_model_checkpoints_round_trip(tmp_path):
    f1 = StochasticClassifier.init(ARCH, seed=0)
    f2 = HyperModel.init(ARCH, seed=1)
    g = GaussianClassifier(np.ones(3), np.zeros(3), (2, 1))
    for i, m in enumerate((f1, f2, g)):
        save_model(m, tmp_path / f"{i}.json")
    assert np.array_equal(load_model(tmp_path / "0.json").theta1, f1.theta1)
    back = load_model(tmp_path / "1.json")
    assert np.array_equal(back.theta2, f2.theta2) and back.sigma2 == f2.sigma2
    assert np.array_equal(load_model(tmp_path / "2.json").mu, g.mu)
