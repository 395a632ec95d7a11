"""Small enumerable fixtures: every divergence and entropy is computed exactly."""
import numpy as np

from pacbound.discrete import random_mixture, random_table, random_world

N_X = 3


def single_task(seed: int, n: int = 10):
    """(posterior, prior, X, y) with latent-mixture classifiers over four tables."""
    rng = np.random.default_rng(seed)
    tables = [random_table(rng, N_X) for _ in range(4)]
    world = random_world(rng, N_X)
    X, y = world.sample(n, rng)
    return random_mixture(rng, tables, 2), random_mixture(rng, tables, 2), X, y


def meta(seed: int, m: int = 3, n: int = 8):
    """(hyper-posterior, hyper-prior, task posteriors, tasks) over a shared table pool."""
    rng = np.random.default_rng(seed)
    tables = [random_table(rng, N_X) for _ in range(3)]
    pool = [random_mixture(rng, tables, 2) for _ in range(3)]
    f2_rho = random_mixture(rng, pool, 2)
    f2_pi = random_mixture(rng, pool, 2)
    posts = [random_mixture(rng, tables, 2) for _ in range(m)]
    tasks = []
    for _ in range(m):
        world = random_world(rng, N_X)
        tasks.append(world.sample(n, rng))
    return f2_rho, f2_pi, posts, tasks
