"""Second-order complexity bounds.

A generalization classifier ``g`` looks at a sampled base classifier and
predicts whether its generalization gap exceeds a threshold ``tau``. The
auxiliary sample pairs sampled base classifiers with the observed gap
indicator on held-out resamples; ``g``'s error there, its complexity and its
firing rate under the trained classifier combine into the bound.

Generalization classifiers implement a small protocol:

* ``outputs(aux, n_draws, rng)`` -> ``(n_draws, n)`` hard outputs of
  ``n_draws`` sampled ``g0`` on every auxiliary row;
* ``paired_outputs(aux, rng)`` -> one independently sampled ``g0`` per row;
* ``kl_to_prior()`` -> KL to the fixed prior over ``g``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..discrete import table_features
from ..mass import MassFunction, kl, normalize
from ..models import GaussianClassifier, StochasticClassifier, f0_features, g_inputs, gaussian_kl
from ..nn import apply_flat
from ..rng import as_generator, generator
from .pac import error_probs, eta_g1, gibbs_risk
from .report import BoundConfig, BoundReport, ConfigError

G_HIDDEN = (5, 5)
TAU_GRID = tuple(round(0.05 * i, 2) for i in range(11))


# -- auxiliary sample -----------------------------------------------------------

@dataclass
class AuxiliarySample:
    """Sampled base classifiers with their gap indicators.

    ``features`` holds the six-feature rows of each sampled classifier on the
    training set; ``thetas`` holds its raw weights when it has any.
    """

    features: np.ndarray
    labels: np.ndarray
    tau: float
    gaps: np.ndarray
    thetas: np.ndarray | None = None
    independent: bool = True
    seed: int | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.labels) == 0:
            raise ConfigError("auxiliary sample is empty")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("auxiliary labels must be 0 or 1")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels are misaligned")

    def __len__(self) -> int:
        return len(self.labels)

    def relabel(self, tau: float) -> "AuxiliarySample":
        """Same sampled classifiers, labels recomputed at another threshold."""
        return AuxiliarySample(self.features, (self.gaps > tau).astype(int), tau, self.gaps, self.thetas,
                               self.independent, self.seed)


def draw_base(f1, n: int, rng):
    """``n`` base classifiers from ``f1``: weight rows or a list of tables."""
    if isinstance(f1, StochasticClassifier):
        return f1.sample_theta0(n, rng)
    if isinstance(f1, MassFunction):
        return f1.sample(rng, n)
    if isinstance(f1, GaussianClassifier):
        return f1.sample_theta(n, rng)
    raise TypeError("cannot sample base classifiers from this model")


def _sizes(f1):
    return f1.arch.base if isinstance(f1, StochasticClassifier) else f1.sizes


def base_risks(f1, draws, X, y) -> np.ndarray:
    """Risk of each drawn base classifier on (X, y)."""
    X = np.asarray(X)
    y = np.asarray(y)
    if len(y) == 0:
        raise ConfigError("dataset is empty")
    if isinstance(draws, np.ndarray):
        sizes = _sizes(f1)
        logits = apply_flat(draws, sizes, np.asarray(X, dtype=float)).data[..., 0]
        return error_probs(1.0 / (1.0 + np.exp(-logits)), y).mean(axis=-1)
    return np.array([error_probs(c.prob1(X), y).mean() for c in draws])


def base_features(f1, draws, X, y) -> np.ndarray:
    if isinstance(draws, np.ndarray):
        return f0_features(draws, _sizes(f1), X, y)
    return np.stack([table_features(c, X, y) for c in draws])


def build_aux_sample(f1, X, y, aux_sets, tau: float, seed=None, independent: bool = True) -> AuxiliarySample:
    """Pair each held-out resample with one freshly sampled base classifier.

    The label is 1 when that classifier's risk on the resample exceeds its
    training risk by more than ``tau``. ``independent`` records the caller's
    assertion that the resamples are independent of ``f1`` and the training set.
    """
    if not aux_sets:
        raise ConfigError("need at least one auxiliary dataset")
    for Xa, ya in aux_sets:
        if len(ya) == 0:
            raise ConfigError("auxiliary dataset is empty")
    rng = as_generator(seed)
    draws = draw_base(f1, len(aux_sets), rng)
    train = base_risks(f1, draws, X, y)
    held = np.array([base_risks(f1, draws[i:i + 1], Xa, ya)[0] for i, (Xa, ya) in enumerate(aux_sets)])
    gaps = held - train
    thetas = draws if isinstance(draws, np.ndarray) else None
    return AuxiliarySample(base_features(f1, draws, X, y), (gaps > tau).astype(int), float(tau), gaps, thetas,
                           independent, None if isinstance(seed, np.random.Generator) else seed)


# -- generalization classifiers ------------------------------------------------

@dataclass(frozen=True)
class ConstantG:
    """A generalization classifier that always answers ``value``."""

    value: int

    def outputs(self, rows, n_draws: int, rng=None) -> np.ndarray:
        return np.full((n_draws, len(rows)), int(self.value))

    def paired_outputs(self, rows, rng=None) -> np.ndarray:
        return np.full(len(rows), int(self.value))

    def prob_one(self, rows) -> np.ndarray:
        return np.full(len(rows), float(self.value))

    def kl_to_prior(self) -> float:
        return 0.0


@dataclass(frozen=True)
class ThresholdRule:
    """``g0(f0) = 1`` when ``sign * (feature[j] - threshold) > 0``."""

    feature: int
    threshold: float
    sign: int = 1

    def __call__(self, rows) -> np.ndarray:
        rows = np.atleast_2d(rows)
        return (self.sign * (rows[:, self.feature] - self.threshold) > 0).astype(int)

    def __lt__(self, other):
        return (self.feature, self.threshold, self.sign) < (other.feature, other.threshold, other.sign)


@dataclass(frozen=True)
class DiscreteG:
    """A finite mixture of rules with a fixed finite prior."""

    posterior: MassFunction
    prior: MassFunction

    def outputs(self, rows, n_draws: int, rng=None) -> np.ndarray:
        rows = _raw_rows(rows)
        rules = self.posterior.sample(as_generator(rng), n_draws)
        return np.stack([r(rows) for r in rules])

    def paired_outputs(self, rows, rng=None) -> np.ndarray:
        rows = _raw_rows(rows)
        rules = self.posterior.sample(as_generator(rng), len(rows))
        return np.array([r(rows[i:i + 1])[0] for i, r in enumerate(rules)])

    def prob_one(self, rows) -> np.ndarray:
        rows = _raw_rows(rows)
        return sum(m * r(rows) for r, m in self.posterior if m > 0)

    def kl_to_prior(self) -> float:
        return kl(self.posterior, self.prior)


def _raw_rows(x) -> np.ndarray:
    return x.features if isinstance(x, AuxiliarySample) else np.atleast_2d(x)


def g_rows(aux_or_rows, mode: str = "features") -> np.ndarray:
    """Inputs the g net sees: squashed features, or raw base weights."""
    if isinstance(aux_or_rows, AuxiliarySample):
        if mode == "theta":
            if aux_or_rows.thetas is None:
                raise ConfigError("raw-weight mode needs sampled weight vectors")
            return aux_or_rows.thetas
        return g_inputs(aux_or_rows.features)
    rows = np.atleast_2d(aux_or_rows)
    return g_inputs(rows) if mode == "features" else rows


@dataclass
class GaussianG:
    """Diagonal Gaussian over the weights of a small net on g inputs.

    Outputs are the sigmoid probability thresholded at 0.5. The prior is the
    standard normal over the same weights.
    """

    q: GaussianClassifier
    mode: str = "features"

    @classmethod
    def init(cls, n_in: int = 6, seed=None, hidden=G_HIDDEN, mode: str = "features",
             log_std: float = -2.0) -> "GaussianG":
        from ..nn import MlpParams

        rng = as_generator(seed)
        sizes = (n_in,) + tuple(hidden) + (1,)
        mu = MlpParams.init(sizes, rng, "tanh").flat()
        return cls(GaussianClassifier(mu, np.full(mu.size, log_std), sizes, kind="g1"), mode)

    @property
    def sizes(self) -> tuple:
        return self.q.sizes

    def _rows(self, rows) -> np.ndarray:
        return g_rows(rows, self.mode)

    def logits(self, thetas, rows) -> np.ndarray:
        return apply_flat(thetas, self.sizes, self._rows(rows)).data[..., 0]

    def outputs(self, rows, n_draws: int, rng=None) -> np.ndarray:
        thetas = self.q.sample_theta(n_draws, as_generator(rng))
        return (self.logits(thetas, rows) > 0).astype(int)

    def paired_outputs(self, rows, rng=None) -> np.ndarray:
        x = self._rows(rows)
        thetas = self.q.sample_theta(len(x), as_generator(rng))
        out = apply_flat(thetas, self.sizes, x[:, None, :]).data[:, 0, 0]
        return (out > 0).astype(int)

    def kl_to_prior(self) -> float:
        return gaussian_kl(self.q, GaussianClassifier.standard(self.sizes))

    def to_json(self) -> dict:
        return {"mode": self.mode, **self.q.to_json()}

    @classmethod
    def from_json(cls, obj) -> "GaussianG":
        return cls(GaussianClassifier.from_json(obj), obj.get("mode", "features"))


@dataclass
class GaussianG2:
    """Hyper-distribution over generalization classifiers.

    Draws the mean weights of a :class:`GaussianG` from ``N(mu, e^{2 log_std})``;
    the drawn classifier keeps the fixed per-weight log-std ``inner_log_std``.
    The prior over means is the standard normal.
    """

    mu: np.ndarray
    log_std: np.ndarray
    sizes: tuple
    inner_log_std: float = -2.0
    mode: str = "features"

    def sample(self, rng=None) -> GaussianG:
        rng = as_generator(rng)
        mean = self.mu + np.exp(self.log_std) * rng.standard_normal(self.mu.size)
        return GaussianG(GaussianClassifier(mean, np.full(self.mu.size, self.inner_log_std), self.sizes,
                                            kind="g1"), self.mode)

    def kl_to_prior(self) -> float:
        q = GaussianClassifier(self.mu, self.log_std, self.sizes)
        return gaussian_kl(q, GaussianClassifier.standard(self.sizes))


# -- bound terms ---------------------------------------------------------------

def risk_tau(g1, aux: AuxiliarySample, n_mc: int = 1000, seed=None) -> float:
    """Mean 0-1 error of sampled generalization classifiers on the auxiliary sample."""
    if len(aux) == 0:
        raise ConfigError("auxiliary sample is empty")
    out = g1.outputs(aux, n_mc, as_generator(seed))
    return float((out != aux.labels[None, :]).mean())


def p1_pool(f1, X, y, n_mc: int = 10_000, seed=None, chunk: int = 2000) -> AuxiliarySample:
    """Base classifiers drawn from ``f1`` with their features, reusable across generalization classifiers."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    rng = as_generator(seed)
    feats, thetas = [], []
    for start in range(0, n_mc, chunk):
        draws = draw_base(f1, min(chunk, n_mc - start), rng)
        feats.append(base_features(f1, draws, X, y))
        thetas.append(draws if isinstance(draws, np.ndarray) else None)
    th = np.concatenate(thetas) if all(t is not None for t in thetas) else None
    return _aux_like(np.concatenate(feats), th)


def p1(g1, f1, X, y, n_mc: int = 10_000, seed=None, pool: AuxiliarySample | None = None) -> tuple[float, float]:
    """Probability that a sampled g fires on a sampled base classifier, with its MC standard error."""
    rng = as_generator(seed)
    if pool is None:
        pool = p1_pool(f1, X, y, n_mc, rng)
    h = np.asarray(g1.paired_outputs(pool, rng), dtype=float)
    se = float(h.std(ddof=1) / math.sqrt(len(h))) if len(h) > 1 else 0.0
    return float(h.mean()), se


def _aux_like(features, draws):
    thetas = draws if isinstance(draws, np.ndarray) else None
    return AuxiliarySample(features, np.zeros(len(features), dtype=int), 0.0, np.zeros(len(features)), thetas)


def p1_exact(g1, f1: MassFunction, X, y) -> float:
    """Exact firing probability for a finite classifier and a g with exact outputs."""
    return float(sum(m * g1.prob_one(table_features(c, X, y)[None, :])[0] for c, m in f1 if m > 0))


def epsilon(tau: float, r_tau: float, eta: float, p_one: float) -> float:
    if tau >= 1:
        return 1.0
    return tau + (r_tau + eta + p_one) * (1 - tau)


def phi_2o_cplx(f1, X, y, g1, tau: float, aux: AuxiliarySample, cfg: BoundConfig, kl_g: float | None = None,
                n_mc: int = 10_000, seed: int = 0, risk: float | None = None, kind: str = "2o",
                pool: AuxiliarySample | None = None) -> BoundReport:
    """Second-order complexity bound for ``f1`` trained on (X, y).

    ``aux`` must carry labels at the same ``tau``. ``risk`` overrides the
    Monte Carlo Gibbs risk on the training set when already known; ``pool``
    supplies pre-drawn base classifiers for the firing-rate term.
    """
    if not 0 <= tau <= 1:
        raise ConfigError("tau must lie in [0, 1]")
    if aux.tau != tau:
        aux = aux.relabel(tau)
    kl_g = g1.kl_to_prior() if kl_g is None else kl_g
    n_aux = len(aux)
    eta = eta_g1(kl_g, cfg, n_aux)
    if risk is None:
        risk = gibbs_risk(f1, X, y, None if isinstance(f1, MassFunction) else min(n_mc, 2000), seed)
    r_tau = risk_tau(g1, aux, min(n_mc, 2000), generator(seed, "risk_tau"))
    if isinstance(f1, MassFunction) and hasattr(g1, "prob_one"):
        p_one, p_se = p1_exact(g1, f1, X, y), 0.0
    else:
        p_one, p_se = p1(g1, f1, X, y, n_mc, generator(seed, "p1"), pool=pool)
    terms = {"empirical_risk": risk, "tau": tau, "risk_tau": r_tau, "eta": eta, "p1": p_one, "kl_g": kl_g,
             "p1_se": p_se}
    return BoundReport.build(kind, terms, cfg.with_(tau=tau, n_aux=n_aux), [seed], n_aux=n_aux,
                             independence_asserted=bool(aux.independent))


def privacy_transform(p, beta: float):
    """Temper a classifier: masses proportional to ``p ** beta``.

    Continuous hypernetwork classifiers are tempered through their noise
    scale instead, ``sigma -> sigma / sqrt(beta)``.
    """
    if beta < 0:
        raise ConfigError("temperature must be nonnegative")
    if isinstance(p, StochasticClassifier):
        return p.tempered(beta)
    if beta == 0:
        return MassFunction.uniform(p.support)
    logm = np.array([math.log(m) if m > 0 else -math.inf for m in p.mass]) * beta
    w = np.exp(logm - np.max(logm))
    return normalize(dict(zip(p.support, w)))


# -- meta-learned generalization classifiers -----------------------------------

@dataclass
class MetaTask:
    f1: object
    X: np.ndarray
    y: np.ndarray
    aux: AuxiliarySample | None
    risk: float | None = None
    extra: dict = field(default_factory=dict)


def eta_g2(kl_g2: float, cfg: BoundConfig, m: int) -> float:
    if m < 1:
        raise ConfigError("need at least one task")
    if math.isinf(kl_g2):
        return math.inf
    return (kl_g2 + cfg.confidence + cfg.lam ** 2 / m) / cfg.lam


def phi_2o_cplx_ml(tasks, g2, new_task: MetaTask, tau: float, cfg: BoundConfig, kl_g2: float | None = None,
                   n_mc: int = 10_000, seed: int = 0) -> tuple[BoundReport, BoundReport]:
    """Meta-learned second-order bound.

    Returns the bound for the new task, evaluated with a generalization
    classifier drawn from ``g2``, and the transfer-error bound: the mean of
    the per-task bounds plus the complexity of ``g2`` over ``M`` tasks.
    Both hold jointly with probability ``1 - 2 delta``.
    """
    m = len(tasks)
    if m < 1:
        raise ConfigError("need at least one training task")
    if any(t.aux is None for t in list(tasks) + [new_task]):
        raise ConfigError("every task needs its own auxiliary sample")
    kl_g2 = g2.kl_to_prior() if kl_g2 is None else kl_g2
    rng = generator(seed, "g2")
    per_task = []
    for i, t in enumerate(tasks):
        g1 = g2.sample(rng)
        rep = phi_2o_cplx(t.f1, t.X, t.y, g1, tau, t.aux, cfg, n_mc=n_mc, seed=int(seed) + 1 + i, risk=t.risk,
                          kind="2o-ml")
        per_task.append(rep.total)
    g_new = g2.sample(rng)
    new = phi_2o_cplx(new_task.f1, new_task.X, new_task.y, g_new, tau, new_task.aux, cfg, n_mc=n_mc,
                      seed=int(seed), risk=new_task.risk, kind="2o-ml")
    new.diagnostics.update(confidence_level=1 - 2 * cfg.delta, m_tasks=m)
    terms = {"task_bound_mean": float(np.mean(per_task)), "eta_g2": eta_g2(kl_g2, cfg, m), "kl_g2": kl_g2}
    transfer = BoundReport.build("2o-ml-transfer", terms, cfg.with_(tau=tau, m_tasks=m), [seed],
                                 task_bounds=per_task, confidence_level=1 - 2 * cfg.delta)
    return new, transfer


__all__ = ["AuxiliarySample", "build_aux_sample", "ConstantG", "ThresholdRule", "DiscreteG", "GaussianG",
           "GaussianG2", "risk_tau", "p1", "p1_exact", "epsilon", "phi_2o_cplx", "privacy_transform", "MetaTask",
           "eta_g2", "phi_2o_cplx_ml", "TAU_GRID", "base_risks", "base_features", "draw_base", "g_rows"]
