"""Suspended stochastic terms with leveled sampling statements.

Terms are immutable trees. A :class:`Sample` node carries a sampling level:
level 1 statements are drawn by the next :func:`run`, higher levels are
decremented by one. Level-1 statements over the same source and with the same
memo label share a single draw within a step; distinct labels draw
independently.

:func:`thunk` enumerates one step exactly, :func:`force` iterates it down to
final values, and :func:`exact_distribution_oracle` computes the same final
distribution from a flat :class:`ProgramSpec` with separate bookkeeping so the
two can be cross-checked.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Union

import numpy as np

from .mass import MassFunction, normalize

DEFAULT_OUTCOME_LIMIT = 10**6
DEFAULT_STEP_LIMIT = 500


class EnumerationLimitError(RuntimeError):
    """Enumeration or reduction exceeded its configured cap."""


class Term:
    """Base class of suspended terms."""


@dataclass(frozen=True)
class Const(Term):
    value: Any


@dataclass(frozen=True)
class Var(Term):
    name: str


@dataclass(frozen=True)
class Lam(Term):
    params: tuple
    body: Term


@dataclass(frozen=True)
class App(Term):
    fn: Term
    args: tuple


@dataclass(frozen=True)
class Prim(Term):
    fn: Callable = field(compare=True)
    args: tuple = ()
    name: str = field(default="", compare=False)

    def __repr__(self) -> str:
        label = self.name or getattr(self.fn, "__name__", "prim")
        return f"{label}({', '.join(map(repr, self.args))})"


@dataclass(frozen=True)
class Sample(Term):
    source: Union[MassFunction, Term]
    level: int = 1
    label: Hashable = None

    def __post_init__(self):
        if self.level < 1:
            raise ValueError("sampling levels start at 1")

    def __repr__(self) -> str:
        tag = f"({self.label})" if self.label is not None else ""
        return f"sample{'+' * self.level}{tag}[{self.source!r}]"


# -- constructors -----------------------------------------------------------

def const(value: Any) -> Const:
    return Const(value)


def sample(source, level: int = 1, label: Hashable = None) -> Sample:
    return Sample(source, level, label)


def prim(fn: Callable, *args, name: str = "") -> Prim:
    return Prim(fn, tuple(_lift(a) for a in args), name)


def lam(params, body: Term) -> Lam:
    if isinstance(params, str):
        params = (params,)
    return Lam(tuple(params), body)


def app(fn: Term, *args) -> App:
    return App(fn, tuple(_lift(a) for a in args))


def _make_tuple(*xs):
    return tuple(xs)


def pair(a, b) -> Prim:
    return prim(_make_tuple, a, b, name="pair")


def tuple_of(*items) -> Prim:
    return prim(_make_tuple, *items, name="tuple")


def _lift(x) -> Term:
    return x if isinstance(x, Term) else Const(x)


# -- inspection ---------------------------------------------------------------

def sample_nodes(term: Term) -> list[Sample]:
    out: list[Sample] = []
    stack = [term]
    while stack:
        t = stack.pop()
        if isinstance(t, Sample):
            out.append(t)
            if isinstance(t.source, Term):
                stack.append(t.source)
        elif isinstance(t, Lam):
            stack.append(t.body)
        elif isinstance(t, App):
            stack.append(t.fn)
            stack.extend(t.args)
        elif isinstance(t, Prim):
            stack.extend(t.args)
    return out


def max_level(term: Term) -> int:
    return max((s.level for s in sample_nodes(term)), default=0)


def is_value(term: Term) -> bool:
    return isinstance(term, (Const, Lam))


# -- deterministic reduction -------------------------------------------------

class _Budget:
    __slots__ = ("left",)

    def __init__(self, steps: int):
        self.left = steps

    def spend(self):
        self.left -= 1
        if self.left < 0:
            raise EnumerationLimitError("reduction step limit exceeded")


def _subst(term: Term, env: dict) -> Term:
    if isinstance(term, Var):
        return env.get(term.name, term)
    if isinstance(term, Const):
        return term
    if isinstance(term, Lam):
        inner = {k: v for k, v in env.items() if k not in term.params}
        return Lam(term.params, _subst(term.body, inner)) if inner else term
    if isinstance(term, App):
        return App(_subst(term.fn, env), tuple(_subst(a, env) for a in term.args))
    if isinstance(term, Prim):
        return Prim(term.fn, tuple(_subst(a, env) for a in term.args), term.name)
    if isinstance(term, Sample):
        src = term.source
        if isinstance(src, Term):
            src = _subst(src, env)
        return Sample(src, term.level, term.label)
    raise TypeError(f"not a term: {term!r}")


def _reduce(term: Term, budget: _Budget) -> Term:
    if isinstance(term, (Const, Var, Lam)):
        return term
    if isinstance(term, Sample):
        src = term.source
        if isinstance(src, Term):
            src = _reduce(src, budget)
            if isinstance(src, Const) and isinstance(src.value, MassFunction):
                src = src.value
        return Sample(src, term.level, term.label)
    if isinstance(term, Prim):
        args = tuple(_reduce(a, budget) for a in term.args)
        if all(isinstance(a, Const) for a in args):
            budget.spend()
            return _lift(term.fn(*(a.value for a in args)))
        return Prim(term.fn, args, term.name)
    if isinstance(term, App):
        fn = _reduce(term.fn, budget)
        args = tuple(_reduce(a, budget) for a in term.args)
        if all(is_value(a) for a in args):
            if isinstance(fn, Lam):
                if len(fn.params) != len(args):
                    raise TypeError("arity mismatch in application")
                budget.spend()
                return _reduce(_subst(fn.body, dict(zip(fn.params, args))), budget)
            if isinstance(fn, Const) and callable(fn.value) and all(isinstance(a, Const) for a in args):
                budget.spend()
                return _lift(fn.value(*(a.value for a in args)))
        return App(fn, args)
    raise TypeError(f"not a term: {term!r}")


def reduce_term(term: Term, step_limit: int = DEFAULT_STEP_LIMIT) -> Term:
    """Deterministic beta-reduction to normal form."""
    try:
        return _reduce(term, _Budget(step_limit))
    except RecursionError as exc:
        raise EnumerationLimitError("reduction recursion too deep") from exc


# -- one probabilistic step --------------------------------------------------

def _memo_groups(term: Term) -> dict:
    """Level-1 statements keyed by (source, label), in first-occurrence order."""
    groups: dict = {}
    for s in _ordered_samples(term):
        if s.level == 1 and isinstance(s.source, MassFunction):
            groups.setdefault((s.source, s.label), s.source)
    return groups


def _ordered_samples(term: Term) -> list[Sample]:
    out: list[Sample] = []

    def walk(t):
        if isinstance(t, Sample):
            out.append(t)
            if isinstance(t.source, Term):
                walk(t.source)
        elif isinstance(t, Lam):
            walk(t.body)
        elif isinstance(t, App):
            walk(t.fn)
            for a in t.args:
                walk(a)
        elif isinstance(t, Prim):
            for a in t.args:
                walk(a)

    walk(term)
    return out


def _step(term: Term, drawn: dict) -> Term:
    """Substitute drawn values for level-1 statements and decrement the rest."""
    if isinstance(term, (Const, Var)):
        return term
    if isinstance(term, Sample):
        if term.level == 1 and isinstance(term.source, MassFunction):
            value = drawn[(term.source, term.label)]
            return value if isinstance(value, Term) else Const(value)
        if isinstance(term.source, Term) and term.level == 1:
            # unresolved source: stays suspended until it reduces to a mass function
            return Sample(_step(term.source, drawn), 1, term.label)
        src = term.source if not isinstance(term.source, Term) else _step(term.source, drawn)
        return Sample(src, term.level - 1, term.label)
    if isinstance(term, Lam):
        return Lam(term.params, _step(term.body, drawn))
    if isinstance(term, App):
        return App(_step(term.fn, drawn), tuple(_step(a, drawn) for a in term.args))
    if isinstance(term, Prim):
        return Prim(term.fn, tuple(_step(a, drawn) for a in term.args), term.name)
    raise TypeError(f"not a term: {term!r}")


def _outcome(term: Term) -> Hashable:
    return term.value if isinstance(term, Const) else term


def run(term: Term, seed=None, step_limit: int = DEFAULT_STEP_LIMIT) -> Term:
    """Execute one sampling step: draw level-1 statements, decrement the others."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    term = reduce_term(term, step_limit)
    groups = _memo_groups(term)
    drawn = {key: src.sample(rng) for key, src in groups.items()}
    return reduce_term(_step(term, drawn), step_limit)


def run_to_value(term: Term, seed=None, max_runs: int = 64, step_limit: int = DEFAULT_STEP_LIMIT):
    """Repeat :func:`run` until no sampling statements remain."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    term = reduce_term(term, step_limit)
    for _ in range(max_runs):
        if not sample_nodes(term):
            return _outcome(term)
        term = run(term, rng, step_limit)
    raise EnumerationLimitError("term did not reach a value within max_runs")


@dataclass(frozen=True)
class ReductionOutcome:
    result: Any
    probability: float
    trace: tuple  # ((source, label), drawn value) per memo group


def enumerate_paths(term: Term, limit: int = DEFAULT_OUTCOME_LIMIT,
                    step_limit: int = DEFAULT_STEP_LIMIT) -> list[ReductionOutcome]:
    """Every joint draw of one step with its probability and resulting term."""
    term = reduce_term(term, step_limit)
    groups = list(_memo_groups(term).items())
    n_paths = math.prod(len(src) for _, src in groups) if groups else 1
    if n_paths > limit:
        raise EnumerationLimitError(f"{n_paths} reduction paths exceed limit {limit}")
    outcomes = []
    for combo in itertools.product(*(tuple(src) for _, src in groups)):
        p = math.prod(m for _, m in combo)
        if p == 0:
            continue
        drawn = {key: value for (key, _), (value, _) in zip(groups, combo)}
        result = _outcome(reduce_term(_step(term, drawn), step_limit))
        outcomes.append(ReductionOutcome(result, p, tuple(drawn.items())))
    return outcomes


def thunk(term: Term, limit: int = DEFAULT_OUTCOME_LIMIT,
          step_limit: int = DEFAULT_STEP_LIMIT) -> MassFunction:
    """Exact distribution over the normal forms reached by one :func:`run`."""
    weights: dict = {}
    for o in enumerate_paths(term, limit, step_limit):
        weights[o.result] = weights.get(o.result, 0.0) + o.probability
    return normalize(weights)


def force(term: Term, limit: int = DEFAULT_OUTCOME_LIMIT, max_runs: int = 64) -> MassFunction:
    """Exact distribution over final values, composing :func:`thunk` steps."""
    weights: dict = {}
    frontier = [(reduce_term(term), 1.0)]
    for _ in range(max_runs):
        if not frontier:
            return normalize(weights)
        nxt = []
        for t, w in frontier:
            if isinstance(t, Term) and sample_nodes(t):
                for out, m in thunk(t, limit):
                    nxt.append((out, w * m))
            else:
                weights[t] = weights.get(t, 0.0) + w
        if len(nxt) > limit:
            raise EnumerationLimitError("forced outcome count exceeds limit")
        frontier = nxt
    raise EnumerationLimitError("term did not reach a value within max_runs")


def sample_many(term: Term, n: int, seed=None, max_runs: int = 64) -> Counter:
    """Counts of final values over ``n`` independent executions.

    Equivalent in distribution to calling :func:`run_to_value` ``n`` times;
    draws are vectorized per memo group and each distinct joint draw is
    reduced once.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    counts: Counter = Counter()
    _sample_into(reduce_term(term), n, rng, counts, max_runs)
    return counts


def _sample_into(term, n, rng, counts, runs_left):
    if not isinstance(term, Term) or not sample_nodes(term):
        counts[term] += n
        return
    if runs_left <= 0:
        raise EnumerationLimitError("term did not reach a value within max_runs")
    groups = list(_memo_groups(term).items())
    if not groups:
        if any(s.level == 1 for s in sample_nodes(term)):
            raise EnumerationLimitError("sampling statements with unresolved sources")
        # nothing to draw at this step: only levels move
        _sample_into(_outcome(reduce_term(_step(term, {}))), n, rng, counts, runs_left - 1)
        return
    idx = np.stack([rng.choice(len(src), size=n, p=src.probs()) for _, src in groups], axis=1)
    rows, freq = np.unique(idx, axis=0, return_counts=True)
    for row, c in zip(rows, freq):
        drawn = {key: src.support[int(i)] for (key, src), i in zip(groups, row)}
        out = _outcome(reduce_term(_step(term, drawn)))
        _sample_into(out, int(c), rng, counts, runs_left - 1)


# -- flat program descriptions and the independent oracle -------------------

@dataclass(frozen=True)
class Statement:
    name: str
    source: MassFunction
    level: int = 1
    label: Hashable = None


@dataclass(frozen=True)
class ProgramSpec:
    """Named sampling statements feeding a deterministic body ``body(**values)``."""

    statements: tuple
    body: Callable

    def to_term(self) -> Term:
        names = [s.name for s in self.statements]
        body = self.body

        def apply(*vals):
            return body(**dict(zip(names, vals)))

        return Prim(apply, tuple(Sample(s.source, s.level, s.label) for s in self.statements), "body")


def exact_distribution_oracle(spec: ProgramSpec, limit: int = DEFAULT_OUTCOME_LIMIT) -> MassFunction:
    """Distribution of final values by explicit path enumeration.

    Statements sharing (level, source, label) are one memo group; every
    other pair is independent.
    """
    group_of: dict = {}
    groups: list = []
    for s in spec.statements:
        key = (s.level, s.source, s.label)
        if key not in group_of:
            group_of[key] = len(groups)
            groups.append(s.source)
    total_paths = 1
    for src in groups:
        total_paths *= len(src)
    if total_paths > limit:
        raise EnumerationLimitError(f"{total_paths} paths exceed limit {limit}")

    table: dict = {}
    paths = [((), 1.0)]
    for src in groups:
        paths = [(vals + (v,), p * m) for vals, p in paths for v, m in zip(src.support, src.mass) if m > 0]
    for vals, p in paths:
        env = {s.name: vals[group_of[(s.level, s.source, s.label)]] for s in spec.statements}
        out = spec.body(**env)
        table[out] = table.get(out, 0.0) + p
    return normalize(table)
