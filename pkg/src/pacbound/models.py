"""Classifier hierarchy built from hypernetworks.

* :class:`DeterministicClassifier` wraps one weight vector (a base net).
* :class:`StochasticClassifier` draws a latent ``z ~ N(0, I_d)``, maps it
  through a hypernetwork to base-net weights and adds isotropic noise of
  standard deviation ``sigma``.
* :class:`HyperModel` does the same one level up: its hypernetwork emits the
  hypernetwork weights of a stochastic classifier.
* :class:`GaussianClassifier` is a diagonal Gaussian over base-net weights,
  used for the restricted baseline and as the default generalization
  classifier.

Base nets output the probability of class 1 through a sigmoid; a sampled
classifier errs on ``(x, y)`` with probability ``1 - p(y | x)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor, as_tensor
from .mass import MassFunction
from .nn import MlpParams, apply_flat, n_params, path_norm_tensor, weight_features_batch
from .rng import as_generator

LOG_2PI = math.log(2 * math.pi)
BASE_HIDDEN = (5, 5)
LATENT_DIM = 2
SIGMA = 0.1


def base_sizes(n_in: int, hidden=BASE_HIDDEN) -> tuple:
    return (n_in,) + tuple(hidden) + (1,)


def bernoulli_loglik(logits: Tensor, y) -> Tensor:
    y = np.asarray(y, dtype=float)
    logits = as_tensor(logits)
    return logits.log_sigmoid() * y + (-logits).log_sigmoid() * (1.0 - y)


def gaussian_logpdf(x, mean, log_std) -> Tensor:
    """Diagonal Gaussian log density summed over the last axis."""
    x, mean, log_std = as_tensor(x), as_tensor(mean), as_tensor(log_std)
    z = (x - mean) / log_std.exp()
    return (z * z * -0.5 - log_std - 0.5 * LOG_2PI).sum(axis=-1)


def std_normal_logpdf(x) -> Tensor:
    x = as_tensor(x)
    return ((x * x) * -0.5 - 0.5 * LOG_2PI).sum(axis=-1)


# -- deterministic ------------------------------------------------------------

class DeterministicClassifier:
    """A single base net; ``prob1`` is its class-1 output."""

    def __init__(self, theta, sizes, hidden: str = "tanh"):
        self.theta = np.asarray(theta, dtype=float)
        self.sizes = tuple(sizes)
        self.hidden = hidden

    @property
    def params(self) -> MlpParams:
        return MlpParams.from_flat(self.theta, self.sizes, self.hidden)

    def logits(self, X) -> np.ndarray:
        return apply_flat(self.theta, self.sizes, np.asarray(X, dtype=float), self.hidden).data[:, 0]

    def prob1(self, X) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits(X)))

    def predict(self, X) -> np.ndarray:
        return (self.prob1(X) >= 0.5).astype(int)

    def __call__(self, X):
        return self.prob1(X)


# -- stochastic (hypernetwork) ------------------------------------------------

@dataclass(frozen=True)
class Arch:
    """Shapes shared by a stochastic classifier family."""

    base: tuple
    hyper_hidden: tuple = BASE_HIDDEN
    d: int = LATENT_DIM
    sigma: float = SIGMA
    hidden: str = "tanh"

    @property
    def p0(self) -> int:
        return n_params(self.base)

    @property
    def hyper(self) -> tuple:
        return (self.d,) + tuple(self.hyper_hidden) + (self.p0,)

    @property
    def p1(self) -> int:
        return n_params(self.hyper)

    def hypernet(self, theta1, z) -> Tensor:
        return apply_flat(theta1, self.hyper, z, self.hidden)

    def base_logits(self, theta0, x) -> Tensor:
        """Logits of shape ``batch + (n,)``."""
        return apply_flat(theta0, self.base, x, self.hidden)[..., 0]

    def to_json(self) -> dict:
        return {"base": list(self.base), "hyper_hidden": list(self.hyper_hidden), "d": self.d,
                "sigma": self.sigma, "hidden": self.hidden}

    @classmethod
    def from_json(cls, obj) -> "Arch":
        return cls(tuple(obj["base"]), tuple(obj["hyper_hidden"]), obj["d"], obj["sigma"], obj["hidden"])


@dataclass
class StochasticClassifier:
    """``theta0 = hypernet(z; theta1) + sigma * e``, ``z ~ N(0, I_d)``."""

    arch: Arch
    theta1: np.ndarray
    kind: str = "f1"

    def __post_init__(self):
        self.theta1 = np.asarray(self.theta1, dtype=float)
        if self.theta1.shape != (self.arch.p1,):
            raise ValueError(f"expected {self.arch.p1} hypernet parameters, got {self.theta1.shape}")
        if self.arch.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @classmethod
    def init(cls, arch: Arch, seed=None, spread: float = 0.1, kind: str = "f1") -> "StochasticClassifier":
        """Hypernet whose z=0 output is a freshly initialized base net."""
        rng = as_generator(seed)
        hyper = MlpParams.init(arch.hyper, rng, arch.hidden, "sigmoid")
        hyper.weights[-1] *= spread
        hyper.biases[-1] = MlpParams.init(arch.base, rng, arch.hidden).flat()
        return cls(arch, hyper.flat(), kind)

    @property
    def sigma(self) -> float:
        return self.arch.sigma

    @property
    def d(self) -> int:
        return self.arch.d

    def mean_theta0(self, z) -> np.ndarray:
        return self.arch.hypernet(self.theta1, np.atleast_2d(z)).data

    def representative(self) -> np.ndarray:
        """Noise-free weights at the latent origin."""
        return self.mean_theta0(np.zeros((1, self.d)))[0]

    def sample_theta0(self, n: int, seed=None) -> np.ndarray:
        rng = as_generator(seed)
        z = rng.standard_normal((n, self.d))
        e = rng.standard_normal((n, self.arch.p0))
        return self.mean_theta0(z) + self.sigma * e

    def tempered(self, beta: float) -> "StochasticClassifier":
        if beta <= 0:
            raise ValueError("temperature must be positive for continuous models")
        return replace(self, arch=replace(self.arch, sigma=self.sigma / math.sqrt(beta)))

    def to_json(self) -> dict:
        hyper = MlpParams.from_flat(self.theta1, self.arch.hyper, self.arch.hidden, "identity").to_json()
        return {"kind": self.kind, "d": self.d, "sigma": self.sigma, "arch": self.arch.to_json(), "hypernet": hyper}

    @classmethod
    def from_json(cls, obj) -> "StochasticClassifier":
        return cls(Arch.from_json(obj["arch"]), MlpParams.from_json(obj["hypernet"]).flat(), obj.get("kind", "f1"))


def sample_classifier(f1: StochasticClassifier, seed=None) -> DeterministicClassifier:
    theta0 = f1.sample_theta0(1, seed)[0]
    return DeterministicClassifier(theta0, f1.arch.base, f1.arch.hidden)


def _class1_probs_theta(arch: Arch, theta0: np.ndarray, X, chunk: int = 2048) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    out = []
    for i in range(0, len(theta0), chunk):
        logits = arch.base_logits(theta0[i:i + chunk], X).data
        out.append(1.0 / (1.0 + np.exp(-logits)))
    return np.concatenate(out, axis=0)


def predict_prob(f1, X, n_mc: int | None = 1000, seed=None) -> np.ndarray:
    """Probability of class 1 at each input, averaged over sampled classifiers.

    ``f1`` is a :class:`StochasticClassifier`, a single classifier, or a
    :class:`MassFunction` over classifiers (exact when ``n_mc`` is None).
    """
    if isinstance(f1, StochasticClassifier):
        if n_mc is None or n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        return _class1_probs_theta(f1.arch, f1.sample_theta0(n_mc, seed), X).mean(axis=0)
    if isinstance(f1, MassFunction):
        if n_mc is None:
            return sum(m * np.asarray(c.prob1(X), dtype=float) for c, m in f1 if m > 0)
        draws = f1.sample(as_generator(seed), n_mc)
        return np.mean([c.prob1(X) for c in draws], axis=0)
    return np.asarray(f1.prob1(X), dtype=float)


def conditional_loglik(f1: StochasticClassifier, X, y, gamma, seed=None) -> np.ndarray:
    """log P(y | x) for the classifier pinned at latent ``gamma`` (one noise draw)."""
    rng = as_generator(seed)
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    e = rng.standard_normal((gamma.shape[0], f1.arch.p0))
    theta0 = f1.arch.hypernet(f1.theta1, gamma).data + f1.sigma * e
    logits = f1.arch.base_logits(theta0, np.asarray(X, dtype=float))
    return bernoulli_loglik(logits, y).data


# -- hyper level --------------------------------------------------------------

@dataclass
class HyperModel:
    """``theta1 = hyper_hypernet(z2; theta2) + sigma2 * e2``."""

    arch: Arch
    theta2: np.ndarray
    hh_hidden: tuple = BASE_HIDDEN
    sigma2: float = SIGMA
    kind: str = "f2"

    def __post_init__(self):
        self.theta2 = np.asarray(self.theta2, dtype=float)
        if self.theta2.shape != (n_params(self.hh_sizes),):
            raise ValueError("hyper-hypernet parameter count mismatch")

    @property
    def hh_sizes(self) -> tuple:
        return (self.arch.d,) + tuple(self.hh_hidden) + (self.arch.p1,)

    @classmethod
    def init(cls, arch: Arch, seed=None, spread: float = 0.1, sigma2: float = SIGMA,
             hh_hidden=BASE_HIDDEN, center: StochasticClassifier | None = None) -> "HyperModel":
        rng = as_generator(seed)
        sizes = (arch.d,) + tuple(hh_hidden) + (arch.p1,)
        hh = MlpParams.init(sizes, rng, arch.hidden, "sigmoid")
        hh.weights[-1] *= spread
        center = center or StochasticClassifier.init(arch, rng)
        hh.biases[-1] = center.theta1.copy()
        return cls(arch, hh.flat(), tuple(hh_hidden), sigma2)

    def hyper_hypernet(self, theta2, z2) -> Tensor:
        return apply_flat(theta2, self.hh_sizes, z2, self.arch.hidden)

    def mean_theta1(self, z2) -> np.ndarray:
        return self.hyper_hypernet(self.theta2, np.atleast_2d(z2)).data

    def sample_theta1(self, n: int, seed=None) -> np.ndarray:
        rng = as_generator(seed)
        z2 = rng.standard_normal((n, self.arch.d))
        e2 = rng.standard_normal((n, self.arch.p1))
        return self.mean_theta1(z2) + self.sigma2 * e2

    def to_json(self) -> dict:
        hh = MlpParams.from_flat(self.theta2, self.hh_sizes, self.arch.hidden, "identity").to_json()
        return {"kind": self.kind, "d": self.arch.d, "sigma": self.arch.sigma, "sigma2": self.sigma2,
                "arch": self.arch.to_json(), "hyper_hypernet": hh}

    @classmethod
    def from_json(cls, obj) -> "HyperModel":
        hh = MlpParams.from_json(obj["hyper_hypernet"])
        return cls(Arch.from_json(obj["arch"]), hh.flat(), tuple(hh.sizes[1:-1]), obj["sigma2"], obj.get("kind", "f2"))


def sample_hyper(f2: HyperModel, seed=None) -> StochasticClassifier:
    return StochasticClassifier(f2.arch, f2.sample_theta1(1, seed)[0])


# -- Gaussian baseline --------------------------------------------------------

@dataclass
class GaussianClassifier:
    """Diagonal Gaussian over the flat weights of a net with ``sizes``."""

    mu: np.ndarray
    log_std: np.ndarray
    sizes: tuple
    hidden: str = "tanh"
    kind: str = "gaussian"

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.log_std = np.broadcast_to(np.asarray(self.log_std, dtype=float), self.mu.shape).copy()
        if self.mu.shape != (n_params(self.sizes),):
            raise ValueError("mean does not match network size")

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @classmethod
    def standard(cls, sizes, hidden="tanh") -> "GaussianClassifier":
        return cls(np.zeros(n_params(sizes)), np.zeros(n_params(sizes)), tuple(sizes), hidden)

    def sample_theta(self, n: int, seed=None) -> np.ndarray:
        rng = as_generator(seed)
        return self.mu + self.std * rng.standard_normal((n, self.mu.size))

    def sample(self, seed=None) -> DeterministicClassifier:
        return DeterministicClassifier(self.sample_theta(1, seed)[0], self.sizes, self.hidden)

    def logits(self, theta, X) -> Tensor:
        return apply_flat(theta, self.sizes, X, self.hidden)[..., 0]

    def to_json(self) -> dict:
        return {"kind": self.kind, "sizes": list(self.sizes), "hidden": self.hidden,
                "mu": self.mu.tolist(), "log_std": self.log_std.tolist()}

    @classmethod
    def from_json(cls, obj) -> "GaussianClassifier":
        return cls(obj["mu"], obj["log_std"], tuple(obj["sizes"]), obj.get("hidden", "tanh"), obj.get("kind", "gaussian"))


def gaussian_kl(q: GaussianClassifier, p: GaussianClassifier) -> float:
    if q.mu.shape != p.mu.shape:
        raise ValueError("dimension mismatch")
    return float(gaussian_kl_tensor(q.mu, q.log_std, p.mu, p.log_std).data)


def gaussian_kl_tensor(mu_q, ls_q, mu_p, ls_p) -> Tensor:
    """KL(N(mu_q, e^{2 ls_q}) || N(mu_p, e^{2 ls_p})) summed over the last axis."""
    mu_q, ls_q, mu_p, ls_p = map(as_tensor, (mu_q, ls_q, mu_p, ls_p))
    var_ratio = ((ls_q - ls_p) * 2.0).exp()
    diff = (mu_q - mu_p) / ls_p.exp()
    return ((var_ratio + diff * diff - 1.0) * 0.5 - (ls_q - ls_p)).sum(axis=-1)


def std_normal_kl(mu, log_std) -> Tensor:
    """KL(N(mu, e^{2 log_std}) || N(0, I)) over the last axis."""
    mu, log_std = as_tensor(mu), as_tensor(log_std)
    return ((mu * mu + (log_std * 2.0).exp() - 1.0) * 0.5 - log_std).sum(axis=-1)


# -- generalization-classifier features --------------------------------------

FEATURE_NAMES = ("l1", "l2", "likelihood", "loglik", "entropy", "path_norm")


@dataclass(frozen=True)
class GFeatureVector:
    l1: float
    l2: float
    likelihood: float
    loglik: float
    entropy: float
    path_norm: float

    def as_array(self) -> np.ndarray:
        return np.array([self.l1, self.l2, self.likelihood, self.loglik, self.entropy, self.path_norm])


def _binary_entropy(q: np.ndarray) -> np.ndarray:
    q = np.clip(q, 1e-300, 1.0)
    r = np.clip(1.0 - q, 1e-300, 1.0)
    return -(q * np.log(q) + r * np.log(r))


def _fit_features(p_true: np.ndarray, q1: np.ndarray) -> np.ndarray:
    logp = np.log(np.clip(p_true, 1e-300, 1.0))
    loglik = logp.mean(axis=-1)
    return np.stack([np.exp(loglik), loglik, _binary_entropy(q1).mean(axis=-1)], axis=-1)


def f0_features(theta0, sizes, X, y, hidden: str = "tanh") -> np.ndarray:
    """Feature rows (B, 6) for a stack of deterministic base nets on (X, y)."""
    theta0 = np.atleast_2d(np.asarray(theta0, dtype=float))
    y = np.asarray(y, dtype=float)
    logits = apply_flat(theta0, sizes, np.asarray(X, dtype=float), hidden).data[..., 0]
    q1 = 1.0 / (1.0 + np.exp(-logits))
    p_true = np.where(y > 0.5, q1, 1.0 - q1)
    w = weight_features_batch(theta0, sizes)
    fit = _fit_features(p_true, q1)
    return np.concatenate([w[:, :2], fit, w[:, 2:]], axis=-1)


def f0_features_tensor(theta0: Tensor, sizes, X, y, hidden: str = "tanh") -> Tensor:
    """Differentiable version of :func:`f0_features` (rows over leading batch)."""
    from .autodiff import concat

    logits = apply_flat(theta0, sizes, X, hidden)[..., 0]
    ll = bernoulli_loglik(logits, y)
    loglik = ll.mean(axis=-1)
    q1 = logits.sigmoid()
    ent = -(q1 * logits.log_sigmoid() + (1.0 - q1) * (-logits).log_sigmoid())
    l1 = theta0.abs().sum(axis=-1)
    l2 = (theta0 * theta0).sum(axis=-1).sqrt()
    pn = path_norm_tensor(theta0, sizes)
    cols = [l1, l2, loglik.exp(), loglik, ent.mean(axis=-1), pn]
    return concat([c.reshape(c.shape + (1,)) for c in cols], axis=-1)


def extract_g_features(f1, X, y, n_mc: int = 100, seed=None) -> GFeatureVector:
    """Six complexity/fit features of a classifier on its training set."""
    if len(y) == 0:
        raise ValueError("training set is empty")
    y = np.asarray(y, dtype=float)
    if isinstance(f1, StochasticClassifier):
        rep = f1.representative()
        q1 = predict_prob(f1, X, n_mc, seed)
        sizes = f1.arch.base
    elif isinstance(f1, DeterministicClassifier):
        rep, sizes = f1.theta, f1.sizes
        q1 = f1.prob1(X)
    else:
        raise TypeError("expected a stochastic or deterministic classifier")
    l1, l2, pn = weight_features_batch(rep[None, :], sizes)[0]
    p_true = np.where(y > 0.5, q1, 1.0 - q1)
    lik, loglik, ent = _fit_features(p_true, q1)
    return GFeatureVector(float(l1), float(l2), float(lik), float(loglik), float(ent), float(pn))


def g_inputs(features) -> np.ndarray:
    """Fixed, data-independent squashing of raw feature rows for the g net."""
    f = np.atleast_2d(np.asarray(features, dtype=float))
    out = f.copy()
    for j in (0, 1, 5):
        out[:, j] = np.log1p(f[:, j])
    out[:, 3] = -np.log1p(-f[:, 3])
    return out


def g_inputs_tensor(features: Tensor) -> Tensor:
    from .autodiff import concat

    cols = [features[..., j] for j in range(6)]
    cols[0] = (cols[0] + 1.0).log()
    cols[1] = (cols[1] + 1.0).log()
    cols[5] = (cols[5] + 1.0).log()
    cols[3] = -((1.0 - cols[3]).log())
    return concat([c.reshape(c.shape + (1,)) for c in cols], axis=-1)


# -- checkpoints --------------------------------------------------------------

def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model.to_json()))


def load_model(path):
    obj = json.loads(Path(path).read_text())
    kind = obj.get("kind")
    if kind in ("f1", "g1") and "hypernet" in obj:
        return StochasticClassifier.from_json(obj)
    if kind in ("f2", "g2"):
        return HyperModel.from_json(obj)
    if kind in ("gaussian", "g1"):
        return GaussianClassifier.from_json(obj)
    raise ValueError(f"unknown checkpoint kind {kind!r}")
