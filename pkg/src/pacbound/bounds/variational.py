"""Variational bounds for hypernetwork classifiers.

The objectives are written once as tensor expressions over explicit
parameter tensors and pre-drawn noise, so the same code evaluates a bound
and provides its training gradient. Fixing the noise (common random
numbers) makes an objective a deterministic function of the parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..autodiff import PoisonedTapeError, Tensor, as_tensor, where
from ..models import (LOG_2PI, Arch, HyperModel, StochasticClassifier, bernoulli_loglik, gaussian_logpdf,
                      std_normal_kl, std_normal_logpdf)
from ..nn import MlpParams, apply_flat
from ..rng import as_generator
from .report import BoundConfig, BoundReport, ConfigError

PRIOR_COMPONENTS = 64
R_HIDDEN = (5, 5)


class PoisonedObjectiveError(PoisonedTapeError):
    """A variational network produced a non-finite output."""


# -- variational networks -----------------------------------------------------

@dataclass
class VariationalNets:
    """Gaussian inference nets over the latent space.

    ``r1`` maps an example ``(x, y)``, ``r2`` a base-net weight vector and
    ``r3`` a hypernet weight vector to a mean and log-std in ``R^d``.
    """

    d: int
    r1: np.ndarray
    r1_sizes: tuple
    r2: np.ndarray
    r2_sizes: tuple
    r3: np.ndarray | None = None
    r3_sizes: tuple | None = None

    @classmethod
    def init(cls, arch: Arch, n_in: int, seed=None, hidden=R_HIDDEN, with_r3: bool = False) -> "VariationalNets":
        rng = as_generator(seed)

        def net(n_from):
            sizes = (n_from,) + tuple(hidden) + (2 * arch.d,)
            p = MlpParams.init(sizes, rng, "tanh", "identity")
            p.weights[-1] *= 0.1
            return p.flat(), sizes

        r1, s1 = net(n_in + 1)
        r2, s2 = net(arch.p0)
        r3, s3 = net(arch.p1) if with_r3 else (None, None)
        return cls(arch.d, r1, s1, r2, s2, r3, s3)

    def arrays(self) -> list:
        return [a for a in (self.r1, self.r2, self.r3) if a is not None]

    def with_arrays(self, arrays) -> "VariationalNets":
        r3 = arrays[2] if self.r3 is not None else None
        return VariationalNets(self.d, arrays[0], self.r1_sizes, arrays[1], self.r2_sizes, r3, self.r3_sizes)

    def to_json(self) -> dict:
        out = {"kind": "variational", "d": self.d,
               "r1": MlpParams.from_flat(self.r1, self.r1_sizes, "tanh", "identity").to_json(),
               "r2": MlpParams.from_flat(self.r2, self.r2_sizes, "tanh", "identity").to_json()}
        if self.r3 is not None:
            out["r3"] = MlpParams.from_flat(self.r3, self.r3_sizes, "tanh", "identity").to_json()
        return out

    @classmethod
    def from_json(cls, obj) -> "VariationalNets":
        parts = {}
        for k in ("r1", "r2", "r3"):
            if k in obj:
                p = MlpParams.from_json(obj[k])
                parts[k] = (p.flat(), p.sizes)
        r3, s3 = parts.get("r3", (None, None))
        return cls(obj["d"], *parts["r1"], *parts["r2"], r3, s3)


def gaussian_head(theta, sizes, inputs, d: int) -> tuple[Tensor, Tensor]:
    out = apply_flat(theta, sizes, inputs, "tanh")
    mean, log_std = out[..., :d], out[..., d:]
    if not np.all(np.isfinite(log_std.data)):
        raise PoisonedObjectiveError("variational net produced a non-finite log-std")
    return mean, log_std


# -- shared pieces ------------------------------------------------------------

def paired_logits(arch: Arch, theta0, X) -> Tensor:
    """Logits where ``theta0[..., i, :]`` is evaluated on example ``X[i]`` only."""
    X = np.asarray(X, dtype=float)
    return apply_flat(theta0, arch.base, X[:, None, :], arch.hidden)[..., 0, 0]


def mixture_logpdf(points, means, sigma: float) -> Tensor:
    """Log density of an equal-weight isotropic Gaussian mixture.

    ``points`` has shape ``(n, P)``; ``means`` has shape ``batch + (K, P)``.
    Returns ``batch + (n,)``.
    """
    points, means = as_tensor(points), as_tensor(means)
    k, p = means.shape[-2], means.shape[-1]
    lead = means.shape[:-2]
    ones = (1,) * len(lead)
    diff = points.reshape(ones + (points.shape[0], 1, p)) - means.reshape(lead + (1, k, p))
    sq = (diff * diff).sum(axis=-1)
    if sigma <= 0:
        raise ConfigError("mixture components need a positive std")
    log_norm = math.log(k) + p * math.log(sigma) + 0.5 * p * LOG_2PI
    return (sq * (-0.5 / sigma ** 2)).logsumexp(axis=-1) - log_norm


def _noise_logpdf(e: np.ndarray, sigma: float) -> np.ndarray:
    """log density of ``sigma * e`` under N(0, sigma^2 I), summed over the last axis."""
    p = e.shape[-1]
    if sigma <= 0:
        return np.full(e.shape[:-1], math.inf)
    return -0.5 * (e * e).sum(-1) - p * math.log(sigma) - 0.5 * p * LOG_2PI


def elbo_parts(arch: Arch, theta1, r1, r1_sizes, X, y, eps_r1, e0) -> tuple[Tensor, Tensor]:
    """(expected NLL under r1, mean KL(r1 || N(0, I))) over a dataset."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    xy = np.concatenate([X, y[:, None]], axis=1)
    mean, log_std = gaussian_head(r1, r1_sizes, xy, arch.d)
    gamma = mean + log_std.exp() * eps_r1
    theta0 = arch.hypernet(theta1, gamma) + e0 * arch.sigma
    ll = bernoulli_loglik(paired_logits(arch, theta0, X), y)
    return -ll.mean(), std_normal_kl(mean, log_std).mean()


def entropy_parts(arch: Arch, theta1, r2, r2_sizes, z, e) -> tuple[Tensor, Tensor]:
    """(negative-entropy upper bound, sampled weight vectors) for one classifier."""
    theta0 = arch.hypernet(theta1, z) + e * arch.sigma
    mean, log_std = gaussian_head(r2, r2_sizes, theta0, arch.d)
    const = std_normal_logpdf(z).data + _noise_logpdf(e, arch.sigma)
    return (-gaussian_logpdf(z, mean, log_std) + const).mean(), theta0


# -- single-task bound --------------------------------------------------------

@dataclass
class Phi1aNoise:
    eps_r1: np.ndarray
    e0: np.ndarray
    z_ent: np.ndarray
    e_ent: np.ndarray
    z_prior: np.ndarray

    @classmethod
    def draw(cls, arch: Arch, n: int, seed=None, n_elbo: int = 1, n_ent: int = 32,
             k_prior: int = PRIOR_COMPONENTS) -> "Phi1aNoise":
        rng = as_generator(seed)
        return cls(rng.standard_normal((n_elbo, n, arch.d)), rng.standard_normal((n_elbo, n, arch.p0)),
                   rng.standard_normal((n_ent, arch.d)), rng.standard_normal((n_ent, arch.p0)),
                   rng.standard_normal((k_prior, arch.d)))


def phi1a_terms(arch: Arch, theta1, r1, r2, nets: VariationalNets, prior: StochasticClassifier, X, y,
                noise: Phi1aNoise) -> dict:
    """Tensor-valued data-dependent terms of the variational single-task bound."""
    nll, kl_r1 = elbo_parts(arch, theta1, r1, nets.r1_sizes, X, y, noise.eps_r1, noise.e0)
    negent, theta0 = entropy_parts(arch, theta1, r2, nets.r2_sizes, noise.z_ent, noise.e_ent)
    means = prior.arch.hypernet(prior.theta1, noise.z_prior).data
    cross = -mixture_logpdf(theta0, means, prior.sigma).mean()
    return {"nll_surrogate": nll, "kl_r1": kl_r1, "entropy_bound": negent, "cross_entropy": cross}


def phi1a_objective(terms: dict, cfg: BoundConfig, n: int) -> Tensor:
    cfg = cfg.with_(n=n)
    return terms["nll_surrogate"] + terms["kl_r1"] + (
        terms["entropy_bound"] + terms["cross_entropy"] + cfg.confidence + cfg.lambda_term()) * (1.0 / cfg.lam)


def phi1a(f1_rho: StochasticClassifier, f1_pi: StochasticClassifier, X, y, nets: VariationalNets,
          cfg: BoundConfig, n_mc: int = 256, seed: int = 0, n_elbo: int = 16) -> BoundReport:
    """Variational single-task bound for a posterior against a frozen prior."""
    if len(y) == 0:
        raise ConfigError("sample is empty")
    noise = Phi1aNoise.draw(f1_rho.arch, len(y), seed, n_elbo=n_elbo, n_ent=n_mc)
    t = phi1a_terms(f1_rho.arch, f1_rho.theta1, nets.r1, nets.r2, nets, f1_pi, X, y, noise)
    cfg = cfg.with_(n=len(y))
    terms = {k: float(v.data) for k, v in t.items()}
    terms.update(confidence=cfg.confidence, lambda_term=cfg.lambda_term())
    return BoundReport.build("phi1a", terms, cfg, [seed], n_mc=n_mc, n_elbo=n_elbo,
                             prior_components=PRIOR_COMPONENTS)


# -- two-level bound ----------------------------------------------------------

@dataclass
class Phi2bNoise:
    z2: np.ndarray
    e2: np.ndarray
    z2_prior: np.ndarray
    z_prior: np.ndarray
    hyper_prior_draws: np.ndarray | None
    tasks: list

    @classmethod
    def draw(cls, model: HyperModel, sizes, seed=None, n_hyper: int = 4, n_ent: int = 8, n_elbo: int = 1,
             k_prior: int = 16, k_hyper: int = 16, prior_model: HyperModel | None = None) -> "Phi2bNoise":
        rng = as_generator(seed)
        arch = model.arch
        tasks = [Phi1aNoise.draw(arch, n, rng, n_elbo=n_elbo, n_ent=n_ent, k_prior=0) for n in sizes]
        draws = prior_model.sample_theta1(n_hyper, rng) if prior_model is not None else None
        return cls(rng.standard_normal((n_hyper, arch.d)), rng.standard_normal((n_hyper, arch.p1)),
                   rng.standard_normal((k_hyper, arch.d)), rng.standard_normal((k_prior, arch.d)), draws, tasks)


def phi2b_terms(model: HyperModel, theta2, task_theta1s, r1, r2, r3, nets: VariationalNets,
                hyper_prior: HyperModel, tasks, noise: Phi2bNoise, cfg: BoundConfig) -> dict:
    """Tensor-valued pieces of the variational two-level bound.

    Returns the hyper-level divergence bound and, per task, the ELBO and the
    prior-averaged square-root complexity.
    """
    arch = model.arch
    if cfg.m_tasks is None:
        cfg = cfg.with_(m_tasks=len(tasks))
    # hyper level: negative entropy of the hyper-posterior plus cross-entropy to the hyper-prior
    theta1_draws = model.hyper_hypernet(theta2, noise.z2) + noise.e2 * model.sigma2
    mean3, ls3 = gaussian_head(r3, nets.r3_sizes, theta1_draws, arch.d)
    const = std_normal_logpdf(noise.z2).data + _noise_logpdf(noise.e2, model.sigma2)
    negent2 = (-gaussian_logpdf(noise.z2, mean3, ls3) + const).mean()
    hp_means = hyper_prior.mean_theta1(noise.z2_prior)
    cross2 = -mixture_logpdf(theta1_draws, hp_means, hyper_prior.sigma2).mean()
    kl_hyper = negent2 + cross2
    # task-level priors are hypernets drawn from the hyper-posterior (or hyper-prior)
    if cfg.task_prior == "hyper_posterior":
        prior_theta1 = theta1_draws
    else:
        prior_theta1 = as_tensor(noise.hyper_prior_draws)
    prior_means = apply_flat(prior_theta1, arch.hyper, noise.z_prior, arch.hidden)  # (H, K, P0)
    elbos, comps = [], []
    for theta1_t, (X, y), tn in zip(task_theta1s, tasks, noise.tasks):
        nll, klr = elbo_parts(arch, theta1_t, r1, nets.r1_sizes, X, y, tn.eps_r1, tn.e0)
        negent, theta0 = entropy_parts(arch, theta1_t, r2, nets.r2_sizes, tn.z_ent, tn.e_ent)
        cross = -mixture_logpdf(theta0, prior_means, arch.sigma).mean(axis=-1)  # (H,)
        a, b, _, _ = cfg.meta_abcd(len(y))
        inner = (cross + negent + kl_hyper + a) * (1.0 / b)
        inner = where(inner.data > 1e-12, inner, 1e-12)
        elbos.append(nll + klr)
        comps.append(inner.sqrt().mean())
    _, _, c, d = cfg.meta_abcd(len(tasks[0][1]))
    hyper_inner = (kl_hyper + c) * (1.0 / d)
    hyper_inner = where(hyper_inner.data > 1e-12, hyper_inner, 1e-12)
    return {"kl_hyper": kl_hyper, "task_elbos": elbos, "task_complexities": comps,
            "hyper_complexity": hyper_inner.sqrt()}


def phi2b_objective(parts: dict) -> Tensor:
    m = len(parts["task_elbos"])
    total = parts["hyper_complexity"]
    for e, c in zip(parts["task_elbos"], parts["task_complexities"]):
        total = total + (e + c) * (1.0 / m)
    return total


def phi2b_variational(f2_rho: HyperModel, f2_pi: HyperModel, posteriors, tasks, nets: VariationalNets,
                      cfg: BoundConfig, seed: int = 0, n_hyper: int = 16, n_ent: int = 64,
                      n_elbo: int = 16) -> BoundReport:
    """Evaluate the variational two-level bound at a larger Monte Carlo budget."""
    if len(tasks) < 2:
        raise ConfigError("meta-learning bound needs M >= 2 tasks")
    if nets.r3 is None:
        raise ConfigError("the two-level bound needs an r3 network")
    sizes = [len(y) for _, y in tasks]
    noise = Phi2bNoise.draw(f2_rho, sizes, seed, n_hyper=n_hyper, n_ent=n_ent, n_elbo=n_elbo,
                            k_prior=PRIOR_COMPONENTS, prior_model=f2_pi)
    parts = phi2b_terms(f2_rho, f2_rho.theta2, [p.theta1 for p in posteriors], nets.r1, nets.r2, nets.r3, nets,
                        f2_pi, tasks, noise, cfg)
    per_task = [float(c.data) for c in parts["task_complexities"]]
    elbos = [float(e.data) for e in parts["task_elbos"]]
    cfg = cfg.with_(m_tasks=len(tasks))
    _, _, c, d = cfg.meta_abcd(sizes[0])
    terms = {"task_elbo": float(np.mean(elbos)), "task_complexity": float(np.mean(per_task)),
             "hyper_complexity": float(parts["hyper_complexity"].data), "kl_hyper": float(parts["kl_hyper"].data),
             "c": c, "d": d}
    return BoundReport.build("phi2b", terms, cfg, [seed], task_elbos=elbos, task_complexities=per_task,
                             n_hyper=n_hyper, n_ent=n_ent)

