"""Bounds on finite fixtures, with every divergence enumerated exactly.

Stochastic classifiers here are :class:`LatentMixture` objects over
:class:`TableClassifier` values; variational distributions are plain dicts
from an observation to a :class:`MassFunction` over latent values. Passing
``None`` for a variational distribution uses the exact latent posterior,
at which point the corresponding bound step is tight.
"""
from __future__ import annotations

import math

import numpy as np

from ..discrete import LatentMixture
from ..mass import MassFunction, kl, normalize
from .pac import error_probs, phi1, phi2_meta
from .report import BoundConfig, BoundReport


def _marg(f) -> MassFunction:
    return f.marginal() if isinstance(f, LatentMixture) else f


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def exact_gibbs_risk(f1, X, y) -> float:
    return float(sum(m * error_probs(c.prob1(X), y).mean() for c, m in _marg(f1) if m > 0))


def label_prob(f1, X, y) -> np.ndarray:
    """Marginal probability of each observed label."""
    p1 = sum(m * np.asarray(c.prob1(X)) for c, m in _marg(f1) if m > 0)
    return np.where(np.asarray(y) > 0.5, p1, 1.0 - p1)


def _cond_label_prob(f1: LatentMixture, gamma, x, y) -> float:
    p1 = sum(m * c.probs[x] for c, m in f1.cond(gamma) if m > 0)
    return p1 if y > 0.5 else 1.0 - p1


def exact_r1(f1: LatentMixture, X, y) -> dict:
    """Exact latent posterior given each observed example."""
    out = {}
    for x, t in zip(np.asarray(X, dtype=int), np.asarray(y, dtype=int)):
        key = (int(x), int(t))
        if key not in out:
            out[key] = normalize({g: m * _cond_label_prob(f1, g, x, t) for g, m in f1.latent if m > 0})
    return out


def exact_r2(f: LatentMixture) -> dict:
    """Exact latent posterior given each value in the mixture's support."""
    return {v: f.posterior(v) for v, m in f.marginal() if m > 0}


def elbo_terms(f1: LatentMixture, X, y, r1: dict | None = None) -> tuple[float, float]:
    """(expected negative log-likelihood under r1, mean KL(r1 || latent))."""
    r1 = exact_r1(f1, X, y) if r1 is None else r1
    nll, klr = 0.0, 0.0
    for x, t in zip(np.asarray(X, dtype=int), np.asarray(y, dtype=int)):
        q = r1[(int(x), int(t))]
        nll -= sum(m * _log(_cond_label_prob(f1, g, x, t)) for g, m in q if m > 0)
        klr += kl(q, f1.latent)
    n = len(y)
    return nll / n, klr / n


def entropy_upper(f: LatentMixture, r2: dict | None = None) -> float:
    """Upper bound on the negative entropy of the mixture's marginal."""
    r2 = exact_r2(f) if r2 is None else r2
    total = 0.0
    for g, zg in f.latent:
        if zg <= 0:
            continue
        for v, c in f.cond(g):
            if c <= 0:
                continue
            r = r2[v].prob(g) if v in r2 else 0.0
            if r <= 0:
                return math.inf
            total += zg * c * (math.log(zg) + math.log(c) - math.log(r))
    return total


def cross_entropy(p, q) -> float:
    """``-E_p[log q]`` over marginals; +inf when q misses mass of p."""
    p, q = _marg(p), _marg(q)
    total = 0.0
    for v, m in p:
        if m > 0:
            qm = q.prob(v)
            if qm <= 0:
                return math.inf
            total -= m * math.log(qm)
    return total


def exact_phi1(f1_rho, f1_pi, X, y, cfg: BoundConfig) -> BoundReport:
    risk = exact_gibbs_risk(f1_rho, X, y)
    return phi1(risk, kl(_marg(f1_rho), _marg(f1_pi)), cfg.with_(n=len(y)))


def exact_phi1a(f1_rho: LatentMixture, f1_pi, X, y, cfg: BoundConfig, r1: dict | None = None,
                r2: dict | None = None) -> BoundReport:
    nll, klr = elbo_terms(f1_rho, X, y, r1)
    cfg = cfg.with_(n=len(y))
    terms = {"nll_surrogate": nll, "kl_r1": klr, "entropy_bound": entropy_upper(f1_rho, r2),
             "cross_entropy": cross_entropy(f1_rho, f1_pi), "confidence": cfg.confidence,
             "lambda_term": cfg.lambda_term()}
    return BoundReport.build("phi1a", terms, cfg, exact=True)


def _prior_draws(f2_rho: LatentMixture, f2_pi: LatentMixture, cfg: BoundConfig) -> MassFunction:
    return (f2_rho if cfg.task_prior == "hyper_posterior" else f2_pi).marginal()


def exact_phi2(f2_rho: LatentMixture, f2_pi: LatentMixture, posteriors, tasks, cfg: BoundConfig) -> BoundReport:
    """Two-level bound with exact divergences; the per-task prior expectation is enumerated."""
    kl_hyper = kl(f2_rho.marginal(), f2_pi.marginal())
    draws = _prior_draws(f2_rho, f2_pi, cfg)
    risks, sizes, per_task = [], [], []
    for f1_t, (X, y) in zip(posteriors, tasks):
        risks.append(exact_gibbs_risk(f1_t, X, y))
        sizes.append(len(y))
        per_task.append([(kl(_marg(f1_t), _marg(p)), m) for p, m in draws if m > 0])
    return _weighted_meta("phi2", kl_hyper, per_task, risks, sizes, cfg)


def exact_phi2b(f2_rho: LatentMixture, f2_pi: LatentMixture, posteriors, tasks, cfg: BoundConfig,
                r1s=None, r2: dict | None = None, r3: dict | None = None) -> BoundReport:
    """Variational two-level bound on a finite fixture.

    ``r1s`` is one example-level dict per task; ``r2`` is shared across tasks;
    ``r3`` inverts the hyper-posterior's latent.
    """
    kl_hyper = entropy_upper(f2_rho, r3) + cross_entropy(f2_rho, f2_pi)
    draws = _prior_draws(f2_rho, f2_pi, cfg)
    risks, sizes, per_task = [], [], []
    for i, (f1_t, (X, y)) in enumerate(zip(posteriors, tasks)):
        r1 = None if r1s is None else r1s[i]
        nll, klr = elbo_terms(f1_t, X, y, r1)
        risks.append(nll + klr)
        sizes.append(len(y))
        r2_t = exact_r2(f1_t) if r2 is None else r2
        negent = entropy_upper(f1_t, r2_t)
        per_task.append([(negent + cross_entropy(f1_t, p), m) for p, m in draws if m > 0])
    return _weighted_meta("phi2b", kl_hyper, per_task, risks, sizes, cfg)


def _weighted_meta(kind, kl_hyper, per_task, risks, sizes, cfg: BoundConfig) -> BoundReport:
    m = len(risks)
    cfg = cfg.with_(m_tasks=m)
    comps = []
    for pairs, n_t in zip(per_task, sizes):
        a, b, _, _ = cfg.meta_abcd(n_t)
        comps.append(sum(w * math.sqrt(max(k + kl_hyper + a, 0.0) / b) for k, w in pairs))
    ref = phi2_meta(kl_hyper, [0.0] * m, risks, sizes, cfg)
    risk_key = "task_risk" if kind == "phi2" else "task_elbo"
    terms = {risk_key: float(np.mean(risks)), "task_complexity": float(np.mean(comps)),
             "hyper_complexity": ref.terms["hyper_complexity"], "kl_hyper": kl_hyper,
             "c": ref.terms["c"], "d": ref.terms["d"]}
    return BoundReport.build(kind, terms, cfg, exact=True)
