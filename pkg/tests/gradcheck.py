"""Central finite-difference checks of the differentiable training objectives.

Each builder returns ``(arrays, loss)`` where ``loss`` maps a list of
parameter tensors to a scalar tensor with all randomness frozen. Small
architectures keep a full sweep cheap; the gradient code paths are the same
as at full size.
"""
import numpy as np

from pacbound.autodiff import grad, param
from pacbound.bounds.report import BoundConfig
from pacbound.bounds.variational import (Phi1aNoise, Phi2bNoise, VariationalNets, phi1a_objective, phi1a_terms,
                                         phi2b_objective, phi2b_terms)
from pacbound.models import Arch, HyperModel, StochasticClassifier
from pacbound.training import _g_surrogate, elbo_objective

SMALL = Arch(base=(2, 3, 1), hyper_hidden=(3,), d=2, sigma=0.1)
CFG = BoundConfig()


def _data(rng, n=6):
    X = rng.normal(size=(n, 2))
    return X, (X[:, 0] > 0).astype(float)


def elbo_case(rng):
    X, y = _data(rng)
    f1 = StochasticClassifier.init(SMALL, rng, spread=0.5)
    nets = VariationalNets.init(SMALL, 2, rng, hidden=(3,))
    noise = Phi1aNoise.draw(SMALL, len(y), rng, n_elbo=2, n_ent=1, k_prior=0)

    def loss(ts):
        return elbo_objective(SMALL, ts[0], ts[1], nets.r1_sizes, X, y, noise)[0]

    return [f1.theta1, nets.r1], loss


def phi1a_case(rng):
    X, y = _data(rng)
    f1 = StochasticClassifier.init(SMALL, rng, spread=0.5)
    prior = StochasticClassifier.init(SMALL, rng, spread=0.5)
    nets = VariationalNets.init(SMALL, 2, rng, hidden=(3,))
    noise = Phi1aNoise.draw(SMALL, len(y), rng, n_elbo=2, n_ent=4, k_prior=8)

    def loss(ts):
        terms = phi1a_terms(SMALL, ts[0], ts[1], ts[2], nets, prior, X, y, noise)
        return phi1a_objective(terms, CFG, len(y))

    return [f1.theta1, nets.r1, nets.r2], loss


def phi2b_case(rng):
    tasks = [_data(rng, 5) for _ in range(2)]
    f2 = HyperModel.init(SMALL, rng, spread=0.5, hh_hidden=(2,))
    prior = HyperModel.init(SMALL, rng, spread=0.5, hh_hidden=(2,))
    posts = [StochasticClassifier.init(SMALL, rng, spread=0.5).theta1 for _ in tasks]
    nets = VariationalNets.init(SMALL, 2, rng, hidden=(3,), with_r3=True)
    noise = Phi2bNoise.draw(f2, [5, 5], rng, n_hyper=2, n_ent=2, k_prior=4, k_hyper=4)

    def loss(ts):
        parts = phi2b_terms(f2, ts[0], ts[1:3], ts[3], ts[4], ts[5], nets, prior, tasks, noise, CFG)
        return phi2b_objective(parts)

    return [f2.theta2, *posts, nets.r1, nets.r2, nets.r3], loss


def g_surrogate_case(rng):
    sizes = (6, 3, 1)
    p = 6 * 3 + 3 + 3 + 1
    aux_rows = rng.normal(size=(8, 6))
    labels = (rng.random(8) < 0.5).astype(float)
    pool_rows = rng.normal(size=(10, 6))
    eps_aux = rng.standard_normal((3, p))
    eps_pool = rng.standard_normal((10, p))
    tau = float(rng.uniform(0, 0.5))

    def loss(ts):
        return _g_surrogate(ts[0], ts[1], sizes, aux_rows, labels, pool_rows, tau, 8, CFG, eps_aux, eps_pool)[0]

    return [rng.normal(size=p) * 0.5, np.full(p, -1.0) + 0.3 * rng.normal(size=p)], loss


CASES = {"elbo": elbo_case, "phi1a": phi1a_case, "phi2b": phi2b_case, "2o_surrogate": g_surrogate_case}


def _value(loss, arrays) -> float:
    return float(loss([param(a) for a in arrays]).data)


def max_relative_error(arrays, loss, coords=None, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Largest ``|ad - fd| / max(|ad|, |fd|, floor)`` over the checked coordinates.

    ``coords`` is a list of (block, index) pairs; ``None`` checks every coordinate.
    """
    ts = [param(a) for a in arrays]
    ad = grad(loss(ts), ts)
    if coords is None:
        coords = [(b, i) for b, a in enumerate(arrays) for i in range(a.size)]
    worst = 0.0
    for b, i in coords:
        up = [a.copy() for a in arrays]
        dn = [a.copy() for a in arrays]
        up[b].flat[i] += h
        dn[b].flat[i] -= h
        fd = (_value(loss, up) - _value(loss, dn)) / (2 * h)
        a = float(ad[b].flat[i])
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
    return worst


def sweep(name: str, n_points: int = 50, per_point: int = 48, seed: int = 0) -> float:
    """Worst relative error over ``n_points`` random parameter points.

    Coordinates are visited in a fixed random cycle so that every parameter
    is checked at least once when ``n_points * per_point`` covers them all.
    """
    worst = 0.0
    rng = np.random.default_rng(seed)
    arrays, _ = CASES[name](np.random.default_rng(seed))
    allc = [(b, i) for b, a in enumerate(arrays) for i in range(a.size)]
    order = [allc[k] for k in rng.permutation(len(allc))]
    per = max(per_point, -(-len(allc) // n_points))
    for k in range(n_points):
        arrays, loss = CASES[name](np.random.default_rng([seed, k]))
        start = (k * per) % len(order)
        coords = (order + order)[start:start + per]
        worst = max(worst, max_relative_error(arrays, loss, coords))
    return worst
