"""Finite-world counterparts of the classifier hierarchy.

Inputs are indices into a finite set, classifiers are lookup tables and
stochastic classifiers are finite latent-variable mixtures, so every
divergence and entropy in the bounds can be enumerated exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calculus import app, const, force, sample
from .mass import MassFunction, mixture, normalize


@dataclass(frozen=True)
class TableClassifier:
    """Deterministic classifier on a finite input set: ``probs[i] = P(y=1 | x=i)``."""

    probs: tuple

    def __post_init__(self):
        object.__setattr__(self, "probs", tuple(round(float(p), 6) for p in self.probs))
        if any(not 0 <= p <= 1 for p in self.probs):
            raise ValueError("class-1 probabilities must lie in [0, 1]")

    def prob1(self, X) -> np.ndarray:
        return np.asarray(self.probs)[np.asarray(X, dtype=int)]

    def predict(self, X) -> np.ndarray:
        return (self.prob1(X) >= 0.5).astype(int)

    def __lt__(self, other):
        return self.probs < other.probs


@dataclass(frozen=True)
class LatentMixture:
    """``value ~ conditional[gamma]`` with ``gamma ~ latent``."""

    latent: MassFunction
    conditional: tuple  # ((gamma, MassFunction), ...)

    def __post_init__(self):
        table = dict(self.conditional)
        missing = [g for g in self.latent.support if g not in table]
        if missing:
            raise ValueError(f"no conditional for latent values {missing}")

    def cond(self, gamma) -> MassFunction:
        return dict(self.conditional)[gamma]

    def marginal(self) -> MassFunction:
        return mixture([(m, self.cond(g)) for g, m in self.latent if m > 0])

    def marginal_by_program(self) -> MassFunction:
        """The marginal computed by running the two-stage sampling program."""
        term = sample(app(const(self.cond), sample(self.latent, 1)), 1)
        return force(term)

    def posterior(self, value) -> MassFunction:
        """Exact latent posterior given an observed value."""
        return normalize({g: m * self.cond(g).prob(value) for g, m in self.latent})

    def __lt__(self, other):
        return repr(self) < repr(other)


def random_table(rng, n_x: int) -> TableClassifier:
    return TableClassifier(tuple(rng.uniform(0.02, 0.98, size=n_x)))


def random_mass(rng, support, alpha: float = 1.0) -> MassFunction:
    w = rng.dirichlet(np.full(len(support), alpha))
    return normalize(dict(zip(support, w + 1e-3)))


def random_mixture(rng, values, n_latent: int = 2) -> LatentMixture:
    latent = random_mass(rng, list(range(n_latent)))
    cond = tuple((g, random_mass(rng, values)) for g in range(n_latent))
    return LatentMixture(latent, cond)


@dataclass(frozen=True)
class FiniteWorld:
    """A known data distribution over ``n_x`` inputs: P(x) and P(y=1 | x)."""

    px: tuple
    py1: tuple

    @property
    def n_x(self) -> int:
        return len(self.px)

    def sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        X = rng.choice(self.n_x, size=n, p=np.asarray(self.px))
        y = (rng.random(n) < np.asarray(self.py1)[X]).astype(int)
        return X, y

    def true_risk(self, clf) -> float:
        """Exact risk of a classifier (table or mass function over tables)."""
        if isinstance(clf, MassFunction):
            return float(sum(m * self.true_risk(c) for c, m in clf if m > 0))
        p1 = np.asarray(clf.probs)
        py1 = np.asarray(self.py1)
        err = py1 * (1 - p1) + (1 - py1) * p1
        return float(np.dot(self.px, err))


def random_world(rng, n_x: int = 4) -> FiniteWorld:
    px = rng.dirichlet(np.ones(n_x))
    py1 = rng.uniform(0.05, 0.95, size=n_x)
    return FiniteWorld(tuple(px), tuple(py1))


def table_features(clf: TableClassifier, X, y) -> np.ndarray:
    """Six-feature row for a lookup-table classifier.

    The table's logits stand in for network weights in the norm features,
    and the path-norm of a single-layer table equals its l2 norm.
    """
    p = np.clip(np.asarray(clf.probs, dtype=float), 1e-6, 1 - 1e-6)
    w = np.log(p) - np.log1p(-p)
    q1 = p[np.asarray(X, dtype=int)]
    p_true = np.where(np.asarray(y) > 0.5, q1, 1.0 - q1)
    loglik = float(np.log(p_true).mean())
    ent = float(-(q1 * np.log(q1) + (1 - q1) * np.log(1 - q1)).mean())
    l2 = float(np.sqrt((w * w).sum()))
    return np.array([np.abs(w).sum(), l2, np.exp(loglik), loglik, ent, l2])
