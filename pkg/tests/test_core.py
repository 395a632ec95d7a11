import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pacbound.calculus import (EnumerationLimitError, ProgramSpec, Statement, app, const, enumerate_paths,
                               exact_distribution_oracle, force, lam, max_level, pair, prim, run, run_to_value,
                               sample, sample_many, sample_nodes, thunk)
from pacbound.mass import DegenerateInputError, MassFunction, entropy, kl, normalize, tv_distance

COIN = MassFunction(("H", "T"), (0.5, 0.5))


# -- mass functions ------------------------------------------------------------

def test_normalize_examples():
    assert normalize({"a": 2, "b": 2}).as_dict() == {"a": 0.5, "b": 0.5}
    assert normalize({"a": 1}).as_dict() == {"a": 1.0}
    with pytest.raises(DegenerateInputError):
        normalize({"a": 0, "b": 0})
    with pytest.raises(DegenerateInputError):
        normalize({"a": -1, "b": 2})


def test_mass_function_invariants():
    with pytest.raises(ValueError):
        MassFunction(("a", "a"), (0.5, 0.5))
    with pytest.raises(ValueError):
        MassFunction(("a", "b"), (0.7, 0.7))
    with pytest.raises(ValueError):
        MassFunction(("a", "b"), (1.5, -0.5))


def test_real_support_is_fixed_precision():
    p = MassFunction((0.1 + 0.2, 1.0), (0.5, 0.5))
    assert p.prob(0.3) == 0.5


def test_kl_examples():
    p = MassFunction((0, 1), (0.5, 0.5))
    assert kl(p, p) == 0.0
    assert kl(p, MassFunction((0, 1), (0.25, 0.75))) == pytest.approx(0.1438, abs=1e-4)
    assert kl(MassFunction((0, 1), (1.0, 0.0)), MassFunction((0, 1), (0.0, 1.0))) == math.inf


def test_entropy_examples():
    assert entropy(MassFunction.point("x")) == 0.0
    assert entropy(MassFunction.uniform(range(4))) == pytest.approx(math.log(4))
    assert entropy(MassFunction((0, 1), (0.9, 0.1))) == pytest.approx(0.3251, abs=1e-4)


masses = st.lists(st.floats(0.01, 10.0), min_size=1, max_size=6)


@settings(max_examples=100, deadline=None)
@given(masses, masses)
def test_kl_nonnegative_and_zero_iff_equal(wp, wq):
    n = min(len(wp), len(wq))
    p = normalize(dict(enumerate(wp[:n])))
    q = normalize(dict(enumerate(wq[:n])))
    d = kl(p, q)
    assert d >= -1e-12
    assert kl(p, p) == pytest.approx(0.0, abs=1e-12)
    if tv_distance(p, q) > 1e-6:
        assert d > 0


@settings(max_examples=100, deadline=None)
@given(masses)
def test_normalized_masses_sum_to_one(w):
    p = normalize(dict(enumerate(w)))
    assert math.fsum(p.mass) == pytest.approx(1.0, abs=1e-9)
    assert 0 <= entropy(p) <= math.log(len(p)) + 1e-12


# -- thunk / run -----------------------------------------------------------------

def test_thunk_of_sample_is_source():
    p = MassFunction(("a", "b", "c"), (0.2, 0.3, 0.5))
    assert thunk(sample(p)).as_dict() == pytest.approx(p.as_dict())


def test_thunk_of_constant_is_point_mass():
    assert thunk(const(7)).as_dict() == {7: 1.0}


def test_memoized_pair_shares_draw():
    s = sample(COIN)
    shared = thunk(pair(s, s)).as_dict()
    assert shared == pytest.approx({("H", "H"): 0.5, ("T", "T"): 0.5})
    unlabeled_twice = thunk(pair(sample(COIN), sample(COIN))).as_dict()
    assert unlabeled_twice == pytest.approx({("H", "H"): 0.5, ("T", "T"): 0.5})
    labeled = thunk(pair(sample(COIN, label="a"), sample(COIN, label="b"))).as_dict()
    assert labeled == pytest.approx({(u, v): 0.25 for u in "HT" for v in "HT"})


def test_run_draws_level_one_and_decrements_level_two():
    term = pair(sample(COIN, 1), sample(COIN, 2))
    out = run(term, seed=0)
    assert max_level(term) == 2
    nodes = sample_nodes(out)
    assert len(nodes) == 1 and nodes[0].level == 1
    first = out.args[0]
    assert first.value in ("H", "T")


def test_run_deterministic_term_reaches_normal_form():
    term = app(lam("x", prim(lambda v: v * 2, app(lam("y", const(3)), const(0)))), const(1))
    assert run(term, seed=1).value == 6


def test_distinct_labels_draw_independently_in_run():
    p = MassFunction(tuple(range(50)), (0.02,) * 50)
    term = pair(sample(p, label="a"), sample(p, label="b"))
    outs = [run_to_value(term, seed=s) for s in range(40)]
    assert any(u != v for u, v in outs)
    shared = pair(sample(p, label="a"), sample(p, label="a"))
    assert all(u == v for u, v in (run_to_value(shared, seed=s) for s in range(40)))


def test_two_level_program_matches_hand_table():
    p = MassFunction((0, 1), (0.3, 0.7))
    term = sample(prim(lambda a, b: MassFunction.point((a, b)), sample(p, 1), sample(p, 2)), 1)
    spec = ProgramSpec((Statement("a", p, 1), Statement("b", p, 2)), lambda a, b: (a, b))
    hand = {(0, 0): 0.09, (0, 1): 0.21, (1, 0): 0.21, (1, 1): 0.49}
    assert force(term).as_dict() == pytest.approx(hand)
    assert exact_distribution_oracle(spec).as_dict() == pytest.approx(hand)


def test_oracle_trivial_programs():
    assert exact_distribution_oracle(ProgramSpec((), lambda: 3)).as_dict() == {3: 1.0}
    coin = exact_distribution_oracle(ProgramSpec((Statement("c", COIN),), lambda c: c))
    assert coin.as_dict() == pytest.approx({"H": 0.5, "T": 0.5})


def test_enumeration_limit_is_an_error():
    big = MassFunction.uniform(range(100))
    term = prim(lambda *xs: xs, *(sample(big, label=i) for i in range(4)))
    with pytest.raises(EnumerationLimitError):
        thunk(term, limit=1000)
    with pytest.raises(EnumerationLimitError):
        force(term, limit=1000)


def test_reduction_outcomes_sum_to_one():
    p = MassFunction((0, 1, 2), (0.2, 0.3, 0.5))
    outs = enumerate_paths(pair(sample(p, label="x"), sample(p, label="y")))
    assert math.fsum(o.probability for o in outs) == pytest.approx(1.0, abs=1e-9)
    assert all(len(o.trace) == 2 for o in outs)


@settings(max_examples=50, deadline=None)
@given(masses, st.integers(0, 2**31 - 1))
def test_round_trip_thunk_run(w, seed):
    p = normalize({f"v{i}": x for i, x in enumerate(w)})
    assert thunk(sample(p)).as_dict() == pytest.approx(p.as_dict(), abs=1e-9)
    assert force(sample(thunk(sample(p)))).as_dict() == pytest.approx(p.as_dict(), abs=1e-9)
    assert run_to_value(sample(p), seed) in p.support


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_level_bookkeeping(top, seed):
    p = MassFunction((0, 1), (0.5, 0.5))
    term = prim(lambda *xs: xs, *(sample(p, k, label=k) for k in range(1, top + 1)))
    assert max_level(term) == top
    assert max_level(run(term, seed)) == top - 1


def test_monte_carlo_matches_thunk():
    p = MassFunction((0, 1, 2), (0.1, 0.6, 0.3))
    term = prim(lambda a, b: a + b, sample(p, label="a"), sample(p, 2, label="b"))
    counts = sample_many(term, 20_000, seed=3)
    emp = normalize(dict(counts))
    assert tv_distance(emp, force(term)) < 0.02
