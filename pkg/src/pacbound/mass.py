"""Finite normalized mass functions.

A :class:`MassFunction` is an immutable distribution over a finite, ordered
support of hashable values. Real-valued support points are stored at a fixed
precision so that values produced by arithmetic coalesce reliably.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Hashable, Iterable, Mapping

import numpy as np

PRECISION = 6
TOLERANCE = 1e-9


class DegenerateInputError(ValueError):
    """Weights cannot be normalized into a distribution."""


def fixed(value: Any) -> Any:
    """Round floats to the fixed support precision; leave other values alone."""
    if isinstance(value, (float, np.floating)):
        r = round(float(value), PRECISION)
        return 0.0 if r == 0 else r
    return value


@dataclass(frozen=True)
class MassFunction:
    support: tuple
    mass: tuple

    def __post_init__(self):
        support = tuple(fixed(v) for v in self.support)
        mass = tuple(float(m) for m in self.mass)
        if len(support) != len(mass):
            raise ValueError("support and mass lengths differ")
        if not support:
            raise DegenerateInputError("empty support")
        if len(set(support)) != len(support):
            raise ValueError("support values must be distinct")
        if any(m < 0 or not math.isfinite(m) for m in mass):
            raise ValueError("masses must be finite and nonnegative")
        if abs(math.fsum(mass) - 1.0) > TOLERANCE:
            raise ValueError(f"masses sum to {math.fsum(mass)!r}, not 1")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "mass", mass)

    @classmethod
    def point(cls, value: Hashable) -> "MassFunction":
        return cls((value,), (1.0,))

    @classmethod
    def uniform(cls, values: Iterable[Hashable]) -> "MassFunction":
        return normalize({v: 1.0 for v in values})

    def __len__(self) -> int:
        return len(self.support)

    def __iter__(self):
        return iter(zip(self.support, self.mass))

    def prob(self, value: Hashable) -> float:
        value = fixed(value)
        for v, m in zip(self.support, self.mass):
            if v == value:
                return m
        return 0.0

    def as_dict(self) -> dict:
        return dict(zip(self.support, self.mass))

    def probs(self) -> np.ndarray:
        return np.asarray(self.mass, dtype=float)

    def sample(self, rng: np.random.Generator, size: int | None = None):
        idx = rng.choice(len(self.support), size=size, p=self.probs())
        if size is None:
            return self.support[int(idx)]
        return [self.support[int(i)] for i in idx]

    def map(self, fn: Callable[[Any], Hashable]) -> "MassFunction":
        """Pushforward through ``fn``; coinciding images are merged."""
        out: dict = {}
        for v, m in self:
            key = fixed(fn(v))
            out[key] = out.get(key, 0.0) + m
        return normalize(out)

    def expect(self, fn: Callable[[Any], float]) -> float:
        return math.fsum(m * fn(v) for v, m in self if m > 0)

    def __repr__(self) -> str:
        body = ", ".join(f"{v!r}: {m:.6g}" for v, m in self)
        return f"MassFunction({{{body}}})"


def normalize(weights: Mapping[Hashable, float]) -> MassFunction:
    """Build a mass function with masses proportional to ``weights``."""
    merged: dict = {}
    for v, w in weights.items():
        w = float(w)
        if w < 0 or not math.isfinite(w):
            raise DegenerateInputError(f"invalid weight {w!r} for {v!r}")
        key = fixed(v)
        merged[key] = merged.get(key, 0.0) + w
    total = math.fsum(merged.values())
    if total <= 0:
        raise DegenerateInputError("all weights are zero")
    support = tuple(merged)
    mass = [merged[v] / total for v in support]
    # absorb rounding drift into the largest mass
    drift = 1.0 - math.fsum(mass)
    if drift:
        i = int(np.argmax(mass))
        mass[i] += drift
    return MassFunction(support, tuple(mass))


def kl(p: MassFunction, q: MassFunction) -> float:
    """KL(p || q) in nats; ``math.inf`` when p charges a point q does not."""
    qd = q.as_dict()
    total = 0.0
    for v, pm in p:
        if pm == 0:
            continue
        qm = qd.get(v, 0.0)
        if qm == 0:
            return math.inf
        total += pm * math.log(pm / qm)
    return max(total, 0.0)


def entropy(p: MassFunction) -> float:
    return -math.fsum(m * math.log(m) for m in p.mass if m > 0)


def tv_distance(p: MassFunction, q: MassFunction) -> float:
    pd, qd = p.as_dict(), q.as_dict()
    keys = set(pd) | set(qd)
    return 0.5 * math.fsum(abs(pd.get(k, 0.0) - qd.get(k, 0.0)) for k in keys)


def empirical(counts: Mapping[Hashable, int]) -> MassFunction:
    return normalize({k: float(c) for k, c in counts.items()})


def mixture(components: Iterable[tuple[float, MassFunction]]) -> MassFunction:
    """Weighted mixture of mass functions (weights must sum to one)."""
    out: dict = {}
    for w, p in components:
        for v, m in p:
            out[v] = out.get(v, 0.0) + w * m
    return normalize(out)
