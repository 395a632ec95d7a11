"""Closed-form PAC-Bayes bounds over supplied risks and divergences."""
from __future__ import annotations

import math

import numpy as np

from ..mass import MassFunction
from ..models import DeterministicClassifier, GaussianClassifier, StochasticClassifier, _class1_probs_theta
from ..rng import as_generator
from .report import BoundConfig, BoundReport, ConfigError


def _check_set(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ConfigError("sample is empty")
    return X, y


def error_probs(prob1, y) -> np.ndarray:
    """Misclassification probability of class-1 probabilities against labels."""
    prob1 = np.asarray(prob1, dtype=float)
    return np.where(np.asarray(y) > 0.5, 1.0 - prob1, prob1)


def classifier_risk(f0, X, y) -> float:
    """Risk of a single classifier: mean of ``1 - p(y | x)``."""
    X, y = _check_set(X, y)
    return float(error_probs(f0.prob1(X), y).mean())


def gibbs_risk(f1, X, y, n_mc: int | None = 1000, seed=None) -> float:
    """Mean misclassification probability of sampled classifiers on (X, y).

    ``n_mc=None`` enumerates a :class:`MassFunction` over classifiers exactly.
    """
    X, y = _check_set(X, y)
    if isinstance(f1, StochasticClassifier):
        if n_mc is None or n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        theta0 = f1.sample_theta0(n_mc, seed)
        return float(error_probs(_class1_probs_theta(f1.arch, theta0, X), y).mean())
    if isinstance(f1, GaussianClassifier):
        theta0 = f1.sample_theta(n_mc, seed)
        logits = f1.logits(theta0, X).data
        return float(error_probs(1.0 / (1.0 + np.exp(-logits)), y).mean())
    if isinstance(f1, MassFunction):
        if n_mc is None:
            return float(sum(m * classifier_risk(c, X, y) for c, m in f1 if m > 0))
        draws = f1.sample(as_generator(seed), n_mc)
        return float(np.mean([classifier_risk(c, X, y) for c in draws]))
    return classifier_risk(f1, X, y)


def gibbs_risk_se(f1: StochasticClassifier, X, y, n_mc: int = 1000, seed=None) -> tuple[float, float]:
    """Gibbs risk and the Monte Carlo standard error over sampled classifiers."""
    X, y = _check_set(X, y)
    per = error_probs(_class1_probs_theta(f1.arch, f1.sample_theta0(n_mc, seed), X), y).mean(axis=1)
    return float(per.mean()), float(per.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else 0.0


def phi1(risk: float, kl: float, cfg: BoundConfig, seeds=()) -> BoundReport:
    """Catoni-style bound ``risk + (kl + log(1/delta) + lam^2/N) / lam``."""
    if not 0 <= risk <= 1:
        raise ConfigError(f"risk must lie in [0, 1], got {risk}")
    if kl < 0 and not math.isclose(kl, 0.0, abs_tol=1e-12):
        raise ConfigError("KL divergence must be nonnegative")
    terms = {"empirical_risk": risk, "kl": max(kl, 0.0), "confidence": cfg.confidence,
             "lambda_term": cfg.lambda_term()}
    return BoundReport.build("phi1", terms, cfg, seeds)


def _mean_sqrt(values, offset: float, scale: float) -> float:
    v = np.atleast_1d(np.asarray(values, dtype=float)) + offset
    if np.any(np.isinf(v)):
        return math.inf
    return float(np.mean(np.sqrt(np.maximum(v, 0.0) / scale)))


def phi1b(risk: float, kl_hyper: float, kl_task, n: int, cfg: BoundConfig, seeds=()) -> BoundReport:
    """Single-task bound with a sampled prior.

    ``kl_task`` holds KL(posterior, prior sample) for each prior draw; the
    square-root term is averaged over those draws.
    """
    a, b = cfg.single_ab(n)
    comp = _mean_sqrt(kl_task, kl_hyper + a, b)
    terms = {"empirical_risk": risk, "complexity": comp, "kl_hyper": kl_hyper,
             "kl_task_mean": float(np.mean(kl_task)), "a": a, "b": b}
    return BoundReport.build("phi1b", terms, cfg.with_(n=n), seeds)


def phi2_meta(kl_hyper: float, task_kls, task_risks, task_sizes, cfg: BoundConfig, kind: str = "phi2",
              seeds=()) -> BoundReport:
    """Two-level meta-learning bound from supplied divergences.

    ``task_kls[t]`` is a scalar or an array of KL values, one per prior draw;
    the per-task square root is averaged over the draws.
    """
    m = len(task_risks)
    if m < 2:
        raise ConfigError("meta-learning bound needs M >= 2 tasks")
    if len(task_kls) != m or len(task_sizes) != m:
        raise ConfigError("task inputs are misaligned")
    cfg = cfg.with_(m_tasks=m)
    per = []
    for kl_t, n_t in zip(task_kls, task_sizes):
        a, b, _, _ = cfg.meta_abcd(n_t)
        per.append(_mean_sqrt(kl_t, kl_hyper + a, b))
    _, _, c, d = cfg.meta_abcd(task_sizes[0])
    terms = {"task_risk": float(np.mean(task_risks)), "task_complexity": float(np.mean(per)),
             "hyper_complexity": _mean_sqrt(kl_hyper, c, d), "kl_hyper": kl_hyper,
             "kl_task_mean": float(np.mean([np.mean(k) for k in task_kls])), "c": c, "d": d}
    return BoundReport.build(kind, terms, cfg, seeds)


def eta_g1(kl_g: float, cfg: BoundConfig, n_aux: int | None = None) -> float:
    """Complexity of the generalization classifier on ``n_aux`` auxiliary points."""
    n_aux = cfg.n_aux if n_aux is None else n_aux
    if n_aux < 1:
        raise ConfigError("need at least one auxiliary point")
    if math.isinf(kl_g):
        return math.inf
    return (kl_g + cfg.confidence + cfg.lam ** 2 / n_aux) / cfg.lam


def deterministic_risk(theta0, sizes, X, y) -> float:
    return classifier_risk(DeterministicClassifier(theta0, sizes), X, y)
