"""Optimization drivers that turn bounds into training objectives.

Every driver is a full-batch gradient loop over explicit parameter arrays.
Monte Carlo noise is redrawn each epoch from a stream derived from
``(seed, label, epoch)``, so a run is reproducible bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, grad, param
from .bounds.pac import gibbs_risk, phi2_meta
from .bounds.report import BoundConfig, BoundReport, ConfigError
from .bounds.second_order import (TAU_GRID, AuxiliarySample, GaussianG, base_features, build_aux_sample, draw_base,
                                  g_rows, p1_pool, phi_2o_cplx, phi_2o_cplx_ml, privacy_transform,
                                  GaussianG2)
from .bounds.variational import (PRIOR_COMPONENTS, Phi1aNoise, Phi2bNoise, VariationalNets, elbo_parts,
                                 phi1a, phi1a_objective, phi1a_terms, phi2b_objective, phi2b_terms,
                                 phi2b_variational)
from .models import (Arch, GaussianClassifier, HyperModel, StochasticClassifier, bernoulli_loglik,
                     f0_features_tensor, g_inputs, g_inputs_tensor, gaussian_kl_tensor)
from .nn import MlpParams, apply_flat, n_params
from .optim import OptimizerState, optimizer_step
from .rng import generator


class TrainingDiverged(FloatingPointError):
    """The objective or its gradient became non-finite; ``trace`` holds the history."""

    def __init__(self, msg: str, trace: "TrainTrace"):
        super().__init__(msg)
        self.trace = trace


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-2
    n_mc: int = 1
    seed: int = 0
    patience: int | None = None
    tau_grid: tuple = TAU_GRID
    beta: float = 1.0
    n_ent: int = 16
    g_epochs: int = 120
    g_lr: float = 5e-2
    g_draws: int = 8
    g_pool: int = 256
    g_mode: str = "features"
    snapshot_every: int | None = None
    eval_mc: int = 256

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.n_mc < 1:
            raise ConfigError("need at least one Monte Carlo sample per step")
        self.tau_grid = tuple(self.tau_grid)

    def with_(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    steps: int = 0
    checkpoints: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def objectives(self) -> list:
        return [r["objective"] for r in self.records]

    def log(self, epoch: int, objective: float, terms: dict, steps: int = 1) -> None:
        self.steps += steps
        self.records.append({"epoch": epoch, "objective": float(objective),
                             "terms": {k: float(v) for k, v in terms.items()}, "steps": self.steps})

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r) for r in self.records)

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl() + ("\n" if self.records else ""))

    @classmethod
    def load(cls, path) -> "TrainTrace":
        recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        return cls(recs, recs[-1]["steps"] if recs else 0)


def moving_average(xs, window: int = 10) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    if len(xs) < window:
        return xs.copy()
    return np.convolve(xs, np.ones(window) / window, mode="valid")


def checksum(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=float)).tobytes())
    return h.hexdigest()


def _value(t) -> float:
    return float(t.data) if isinstance(t, Tensor) else float(t)


def fit(arrays: list, loss_fn, cfg: TrainConfig, label: str, trace: TrainTrace | None = None,
        lr: float | None = None, epochs: int | None = None, snapshot=None) -> tuple[list, TrainTrace]:
    """Minimize ``loss_fn(tensors, rng) -> (loss, terms)`` with Adam.

    Returns the final arrays and the trace. Non-finite objectives or
    gradients abort with :class:`TrainingDiverged`.
    """
    trace = TrainTrace() if trace is None else trace
    epochs = cfg.epochs if epochs is None else epochs
    state = OptimizerState.for_params(arrays, lr=cfg.lr if lr is None else lr)
    arrays = [np.array(a, dtype=float) for a in arrays]
    best, stale = math.inf, 0
    for epoch in range(epochs):
        rng = generator(cfg.seed, label, epoch)
        tensors = [param(a) for a in arrays]
        try:
            loss, terms = loss_fn(tensors, rng)
            grads = grad(loss, tensors)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"{label}: {exc}", trace) from exc
        value = _value(loss)
        if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDiverged(f"{label}: non-finite objective at epoch {epoch}", trace)
        trace.log(epoch, value, {k: _value(v) for k, v in terms.items()})
        arrays, state = optimizer_step(state, arrays, grads)
        if snapshot is not None and cfg.snapshot_every and (epoch + 1) % cfg.snapshot_every == 0:
            trace.checkpoints.append(snapshot(arrays, epoch))
        if cfg.patience:
            if value < best - 1e-6:
                best, stale = value, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    return arrays, trace


# -- ELBO pretraining -------------------------------------------------------------

def elbo_objective(arch: Arch, theta1, r1, r1_sizes, X, y, noise: Phi1aNoise) -> tuple[Tensor, dict]:
    nll, kl_r1 = elbo_parts(arch, theta1, r1, r1_sizes, X, y, noise.eps_r1, noise.e0)
    return nll + kl_r1, {"nll": nll, "kl_r1": kl_r1}


def elbo_pretrain(X, y, arch: Arch, cfg: TrainConfig, init: StochasticClassifier | None = None,
                  nets: VariationalNets | None = None, label: str = "elbo"):
    """Fit a stochastic classifier by maximizing the reparameterized ELBO.

    Returns (classifier, trace, variational nets).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ConfigError("dataset is empty")
    f1 = init or StochasticClassifier.init(arch, generator(cfg.seed, label, "init"))
    nets = nets or VariationalNets.init(arch, X.shape[1], generator(cfg.seed, label, "nets"))

    def loss(ts, rng):
        noise = Phi1aNoise.draw(arch, len(y), rng, n_elbo=cfg.n_mc, n_ent=1, k_prior=0)
        return elbo_objective(arch, ts[0], ts[1], nets.r1_sizes, X, y, noise)

    def snap(arrays, epoch):
        return {"epoch": epoch, "theta1": arrays[0].copy()}

    (theta1, r1), trace = fit([f1.theta1, nets.r1], loss, cfg, label, snapshot=snap)
    trace.info["kind"] = "elbo"
    out = StochasticClassifier(arch, theta1, f1.kind)
    return out, trace, VariationalNets(nets.d, r1, nets.r1_sizes, nets.r2, nets.r2_sizes, nets.r3, nets.r3_sizes)


# -- variational single-task bound ----------------------------------------------

def train_phi1a(X, y, prior: StochasticClassifier, cfg: TrainConfig, bound_cfg: BoundConfig,
                init: StochasticClassifier | None = None, nets: VariationalNets | None = None,
                label: str = "phi1a"):
    """Minimize the variational bound over the posterior and both inference nets.

    The prior stays frozen. Returns (posterior, report, trace, nets).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    arch = prior.arch
    before = checksum(prior.theta1)
    post = init or StochasticClassifier(arch, prior.theta1.copy())
    nets = nets or VariationalNets.init(arch, X.shape[1], generator(cfg.seed, label, "nets"))
    n = len(y)

    def loss(ts, rng):
        noise = Phi1aNoise.draw(arch, n, rng, n_elbo=cfg.n_mc, n_ent=cfg.n_ent, k_prior=PRIOR_COMPONENTS)
        terms = phi1a_terms(arch, ts[0], ts[1], ts[2], nets, prior, X, y, noise)
        return phi1a_objective(terms, bound_cfg, n), terms

    def snap(arrays, epoch):
        return {"epoch": epoch, "theta1": arrays[0].copy()}

    (theta1, r1, r2), trace = fit([post.theta1, nets.r1, nets.r2], loss, cfg, label, snapshot=snap)
    if checksum(prior.theta1) != before:
        raise RuntimeError("prior parameters changed during posterior training")
    trace.info.update(kind="phi1a", prior_checksum=before)
    post = StochasticClassifier(arch, theta1, post.kind)
    nets = VariationalNets(nets.d, r1, nets.r1_sizes, r2, nets.r2_sizes, nets.r3, nets.r3_sizes)
    report = phi1a(post, prior, X, y, nets, bound_cfg, n_mc=cfg.eval_mc, seed=int(generator(cfg.seed, label,
                                                                                               "eval").integers(2**31)))
    return post, report, trace, nets


def fit_phi1a_nets(f1: StochasticClassifier, X, y, prior: StochasticClassifier, cfg: TrainConfig,
                   bound_cfg: BoundConfig, label: str = "phi1a-nets"):
    """Evaluate the variational bound for a fixed classifier, optimizing only r1 and r2.

    Returns (report, nets).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    arch = f1.arch
    nets = VariationalNets.init(arch, X.shape[1], generator(cfg.seed, label, "nets"))
    n = len(y)

    def loss(ts, rng):
        noise = Phi1aNoise.draw(arch, n, rng, n_elbo=cfg.n_mc, n_ent=cfg.n_ent, k_prior=PRIOR_COMPONENTS)
        terms = phi1a_terms(arch, f1.theta1, ts[0], ts[1], nets, prior, X, y, noise)
        return phi1a_objective(terms, bound_cfg, n), terms

    (r1, r2), _ = fit([nets.r1, nets.r2], loss, cfg, label)
    nets = VariationalNets(nets.d, r1, nets.r1_sizes, r2, nets.r2_sizes)
    seed = int(generator(cfg.seed, label, "eval").integers(2**31))
    return phi1a(f1, prior, X, y, nets, bound_cfg, n_mc=cfg.eval_mc, seed=seed), nets


# -- meta-learning -------------------------------------------------------------------

@dataclass
class MetaResult:
    hyper_posterior: HyperModel
    hyper_prior: HyperModel
    posteriors: list
    report: BoundReport
    trace: TrainTrace
    nets: VariationalNets


def task_groups(m: int, size: int, rng) -> list:
    order = rng.permutation(m)
    return [order[i:i + size] for i in range(0, m, size)]


def train_meta(tasks, arch: Arch, cfg: TrainConfig, bound_cfg: BoundConfig, group_size: int = 3,
               hyper_prior: HyperModel | None = None, label: str = "meta", n_hyper: int = 4,
               warm_start: int = 0, hyper_warmup: int = 0) -> MetaResult:
    """Jointly fit a hyper-posterior, per-task posteriors and inference nets.

    Each step uses one group of tasks; an epoch visits every group once.
    Constants use the full task count. Optional staged initialization:
    ``warm_start`` full-batch ELBO epochs for the task posteriors, then
    ``hyper_warmup`` epochs in which only the hyper-posterior and inference
    nets move, before ``cfg.epochs`` epochs of joint descent.
    """
    m = len(tasks)
    if m < 2:
        raise ConfigError("meta-learning needs M >= 2 tasks")
    tasks = [(np.asarray(X, dtype=float), np.asarray(y, dtype=float)) for X, y in tasks]
    n_in = tasks[0][0].shape[1]
    bound_cfg = bound_cfg.with_(m_tasks=m)
    hp = hyper_prior or HyperModel.init(arch, generator(cfg.seed, label, "hyper-prior"))
    nets = VariationalNets.init(arch, n_in, generator(cfg.seed, label, "nets"), with_r3=True)
    center = hp.mean_theta1(np.zeros((1, arch.d)))[0]
    thetas = [center.copy() for _ in range(m)]
    r1 = nets.r1
    trace = TrainTrace()
    if warm_start:
        def elbo_all(ts, rng):
            total = 0.0
            for theta, (X, y) in zip(ts[1:], tasks):
                noise = Phi1aNoise.draw(arch, len(y), rng, n_elbo=cfg.n_mc, n_ent=1, k_prior=0)
                total = total + elbo_objective(arch, theta, ts[0], nets.r1_sizes, X, y, noise)[0]
            return total * (1.0 / m), {}

        arrays, trace = fit([r1] + thetas, elbo_all, cfg, f"{label}:warm", trace, epochs=warm_start)
        r1, thetas = arrays[0], arrays[1:]
        for r in trace.records:
            r["phase"] = "warm_start"
    arrays = [hp.theta2.copy(), r1, nets.r2, nets.r3] + thetas
    state = OptimizerState.for_params(arrays, lr=cfg.lr)
    model = HyperModel(arch, hp.theta2, hp.hh_hidden, hp.sigma2)
    for epoch in range(hyper_warmup + cfg.epochs):
        frozen = epoch < hyper_warmup
        rng = generator(cfg.seed, label, epoch)
        ep_obj, ep_terms = [], []
        for group in task_groups(m, group_size, rng):
            sub = [tasks[i] for i in group]
            noise = Phi2bNoise.draw(model, [len(y) for _, y in sub], rng, n_hyper=n_hyper, n_ent=cfg.n_ent,
                                    n_elbo=cfg.n_mc, prior_model=hp if bound_cfg.task_prior != "hyper_posterior"
                                    else None)
            ts = [param(a) for a in arrays]
            idx = [4 + i for i in group]
            try:
                parts = phi2b_terms(model, ts[0], [ts[i] for i in idx], ts[1], ts[2], ts[3], nets, hp, sub, noise,
                                    bound_cfg)
                # the per-step objective averages over this group only
                loss = phi2b_objective(parts)
                grads = grad(loss, ts)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{label}: {exc}", trace) from exc
            if not math.isfinite(float(loss.data)):
                raise TrainingDiverged(f"{label}: non-finite objective at epoch {epoch}", trace)
            if frozen:
                grads = [g if i < 4 and i != 1 else np.zeros_like(g) for i, g in enumerate(grads)]
            arrays, state = optimizer_step(state, arrays, grads)
            ep_obj.append(float(loss.data))
            ep_terms.append([float(np.mean([e.data for e in parts["task_elbos"]])),
                             float(np.mean([c.data for c in parts["task_complexities"]])),
                             float(parts["kl_hyper"].data)])
            trace.steps += 1
        mean_terms = dict(zip(("task_elbo", "task_complexity", "kl_hyper"), np.mean(ep_terms, axis=0)))
        trace.records.append({"epoch": epoch, "objective": float(np.mean(ep_obj)),
                              "terms": {k: float(v) for k, v in mean_terms.items()}, "steps": trace.steps,
                              "phase": "hyper_warmup" if frozen else "joint"})
    f2 = HyperModel(arch, arrays[0], hp.hh_hidden, hp.sigma2)
    nets = VariationalNets(nets.d, arrays[1], nets.r1_sizes, arrays[2], nets.r2_sizes, arrays[3], nets.r3_sizes)
    posts = [StochasticClassifier(arch, arrays[4 + i]) for i in range(m)]
    eval_seed = int(generator(cfg.seed, label, "eval").integers(2**31))
    report = phi2b_variational(f2, hp, posts, tasks, nets, bound_cfg, seed=eval_seed)
    trace.info["kind"] = "meta"
    return MetaResult(f2, hp, posts, report, trace, nets)


@dataclass
class GaussianMetaResult:
    hyper_mu: np.ndarray
    hyper_log_std: np.ndarray
    posteriors: list
    report: BoundReport
    trace: TrainTrace


def _gauss_complexity(mu_t, ls_t, prior_mu, prior_ls, kl_hyper, a, b) -> Tensor:
    """Prior-averaged square-root complexity for one Gaussian task posterior."""
    kls = gaussian_kl_tensor(mu_t, ls_t, prior_mu, prior_ls)  # (K,)
    return ((kls + kl_hyper + a) * (1.0 / b)).sqrt().mean()


def train_gaussian_meta(tasks, sizes, cfg: TrainConfig, bound_cfg: BoundConfig, group_size: int = 3,
                        n_prior: int = 4, label: str = "gauss-meta", hyper_log_std: float = -2.0
                        ) -> GaussianMetaResult:
    """Meta-learning with Gaussian priors, posteriors and hyper-posterior.

    Task priors are ``N(m, e^{2 l})`` over base weights; the hyper-posterior is
    ``N(mu_Q, e^{2 s_Q})`` over ``(m, l)`` with a fixed ``s_Q`` and the
    hyper-prior is the standard normal. All divergences are closed-form.
    """
    m = len(tasks)
    if m < 2:
        raise ConfigError("meta-learning needs M >= 2 tasks")
    tasks = [(np.asarray(X, dtype=float), np.asarray(y, dtype=float)) for X, y in tasks]
    p = n_params(sizes)
    bound_cfg = bound_cfg.with_(m_tasks=m)
    init = MlpParams.init(sizes, generator(cfg.seed, label, "init")).flat()
    mu_q = np.concatenate([init, np.full(p, -2.0)])
    ls_q = np.full(2 * p, hyper_log_std)
    arrays = [mu_q] + [init.copy() for _ in range(m)] + [np.full(p, -2.0) for _ in range(m)]
    state = OptimizerState.for_params(arrays, lr=cfg.lr)
    trace = TrainTrace()
    _, _, c, d = bound_cfg.meta_abcd(len(tasks[0][1]))

    def objective(ts, group, rng):
        mu_q_t = ts[0]
        kl_hyper = gaussian_kl_tensor(mu_q_t, ls_q, np.zeros(2 * p), np.zeros(2 * p))
        draws = mu_q_t + np.exp(ls_q) * rng.standard_normal((n_prior, 2 * p))
        prior_mu, prior_ls = draws[:, :p], draws[:, p:]
        total = ((kl_hyper + c) * (1.0 / d)).sqrt()
        for i in group:
            X, y = tasks[i]
            mu_t, ls_t = ts[1 + i], ts[1 + m + i]
            theta = mu_t + ls_t.exp() * rng.standard_normal((cfg.n_mc, p))
            logits = apply_flat(theta, sizes, X)[..., 0]
            nll = -bernoulli_loglik(logits, y).mean()
            a, b, _, _ = bound_cfg.meta_abcd(len(y))
            comp = _gauss_complexity(mu_t, ls_t, prior_mu, prior_ls, kl_hyper, a, b)
            total = total + (nll + comp) * (1.0 / len(group))
        return total

    for epoch in range(cfg.epochs):
        rng = generator(cfg.seed, label, epoch)
        ep = []
        for group in task_groups(m, group_size, rng):
            ts = [param(a) for a in arrays]
            try:
                loss = objective(ts, group, rng)
                grads = grad(loss, ts)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{label}: {exc}", trace) from exc
            arrays, state = optimizer_step(state, arrays, grads)
            ep.append(float(loss.data))
            trace.steps += 1
        trace.records.append({"epoch": epoch, "objective": float(np.mean(ep)), "terms": {}, "steps": trace.steps})
    posts = [GaussianClassifier(arrays[1 + i], arrays[1 + m + i], tuple(sizes)) for i in range(m)]
    report = gaussian_meta_bound(arrays[0], ls_q, posts, tasks, bound_cfg,
                                 seed=int(generator(cfg.seed, label, "eval").integers(2**31)))
    trace.info["kind"] = "gaussian-meta"
    return GaussianMetaResult(arrays[0], ls_q, posts, report, trace)


def gaussian_meta_bound(mu_q, ls_q, posts, tasks, cfg: BoundConfig, seed: int = 0, n_prior: int = 64,
                        n_mc: int = 1000) -> BoundReport:
    """Two-level bound for the Gaussian meta model: exact KLs, Monte Carlo Gibbs risks."""
    p = posts[0].mu.size
    rng = generator(seed, "gauss-bound")
    kl_hyper = float(gaussian_kl_tensor(mu_q, ls_q, np.zeros_like(mu_q), np.zeros_like(mu_q)).data)
    draws = mu_q + np.exp(ls_q) * rng.standard_normal((n_prior, mu_q.size))
    task_kls, risks = [], []
    for q, (X, y) in zip(posts, tasks):
        task_kls.append(gaussian_kl_tensor(q.mu, q.log_std, draws[:, :p], draws[:, p:]).data)
        risks.append(gibbs_risk(q, X, y, n_mc, rng))
    rep = phi2_meta(kl_hyper, task_kls, risks, [len(y) for _, y in tasks], cfg, kind="gaussian-phi2", seeds=[seed])
    return rep


# -- second-order bound ---------------------------------------------------------------

@dataclass
class SecondOrderResult:
    g1: GaussianG
    tau: float
    report: BoundReport
    per_tau: dict
    aux: AuxiliarySample


def _g_surrogate(mu: Tensor, ls: Tensor, sizes, aux_rows, labels, pool_rows, tau: float, n_aux: int,
                 bound_cfg: BoundConfig, eps_aux, eps_pool) -> tuple[Tensor, dict]:
    """Differentiable stand-in for the complexity term at one threshold.

    The 0-1 error on the auxiliary sample is replaced by the binary
    cross-entropy in bits; the firing rate by the mean sigmoid output.
    """
    std = ls.exp()
    th_aux = mu + std * eps_aux                       # (G, P)
    logits = apply_flat(th_aux, sizes, aux_rows)[..., 0]  # (G, N')
    r_sur = -bernoulli_loglik(logits, labels).mean() * (1.0 / math.log(2.0))
    th_pool = mu + std * eps_pool                     # (B, P)
    pool = apply_flat(th_pool, sizes, pool_rows[:, None, :])[..., 0, 0]
    p_sur = pool.sigmoid().mean()
    kl = gaussian_kl_tensor(mu, ls, np.zeros(mu.shape), np.zeros(mu.shape))
    eta = (kl + bound_cfg.confidence + bound_cfg.lam ** 2 / n_aux) * (1.0 / bound_cfg.lam)
    obj = (r_sur + eta + p_sur) * (1.0 - tau) + tau
    return obj, {"risk_tau_surrogate": r_sur, "eta": eta, "p1_surrogate": p_sur, "kl_g": kl}


def train_g(aux: AuxiliarySample, pool_rows: np.ndarray, tau: float, cfg: TrainConfig, bound_cfg: BoundConfig,
            label: str = "g", init: GaussianG | None = None) -> tuple[GaussianG, TrainTrace]:
    """Fit a Gaussian generalization classifier at threshold ``tau``."""
    aux = aux.relabel(tau)
    g = init or GaussianG.init(pool_rows.shape[1] if cfg.g_mode == "theta" else 6,
                               generator(cfg.seed, label, "init"), mode=cfg.g_mode)
    sizes = g.sizes
    rows = g_rows(aux, cfg.g_mode)
    labels = aux.labels.astype(float)
    pool = pool_rows
    p = g.q.mu.size

    def loss(ts, rng):
        eps_aux = rng.standard_normal((cfg.g_draws, p))
        eps_pool = rng.standard_normal((len(pool), p))
        return _g_surrogate(ts[0], ts[1], sizes, rows, labels, pool, tau, len(aux), bound_cfg, eps_aux, eps_pool)

    (mu, ls), trace = fit([g.q.mu, g.q.log_std], loss, cfg, f"{label}:{tau}", lr=cfg.g_lr, epochs=cfg.g_epochs)
    return GaussianG(GaussianClassifier(mu, ls, sizes, kind="g1"), g.mode), trace


def _pool_rows(f1, X, y, n: int, rng, mode: str) -> np.ndarray:
    draws = draw_base(f1, n, rng)
    if mode == "theta":
        return draws
    return g_inputs(base_features(f1, draws, X, y))


def optimize_2o(f1, X, y, aux_sets, cfg: TrainConfig, bound_cfg: BoundConfig, label: str = "2o",
                risk: float | None = None, n_mc: int = 10_000) -> SecondOrderResult:
    """Search the threshold grid, fit g at each threshold, keep the tightest bound.

    Confidence is split evenly over the grid (union bound).
    """
    grid = tuple(cfg.tau_grid)
    if not grid:
        raise ConfigError("threshold grid is empty")
    X = np.asarray(X)
    y = np.asarray(y)
    seed = int(generator(cfg.seed, label, "seed").integers(2**31))
    aux = build_aux_sample(f1, X, y, aux_sets, grid[0], generator(seed, "aux"))
    if risk is None:
        risk = gibbs_risk(f1, X, y, 2000, generator(seed, "risk"))
    pool = _pool_rows(f1, X, y, cfg.g_pool, generator(seed, "pool"), cfg.g_mode)
    per_bound = bound_cfg.with_(delta=bound_cfg.delta / len(grid))
    eval_pool = p1_pool(f1, X, y, n_mc, generator(seed, "p1-pool"))
    per_tau, best = {}, None
    for tau in grid:
        if tau >= 1:
            g = GaussianG.init(6, generator(seed, "g-init"), mode=cfg.g_mode)
        else:
            g, _ = train_g(aux, pool, tau, cfg, per_bound, label=f"{label}:g")
        rep = phi_2o_cplx(f1, X, y, g, tau, aux.relabel(tau), per_bound, n_mc=n_mc, seed=seed, risk=risk,
                          pool=eval_pool)
        rep.diagnostics.update(grid_size=len(grid), delta_total=bound_cfg.delta)
        per_tau[tau] = rep
        if best is None or rep.total < best[2].total:
            best = (g, tau, rep)
    g, tau, rep = best
    return SecondOrderResult(g, tau, rep, per_tau, aux.relabel(tau))


def pooled_aux(samples) -> AuxiliarySample:
    """Concatenate auxiliary samples from several tasks (raw weights dropped)."""
    return AuxiliarySample(np.concatenate([a.features for a in samples]),
                           np.concatenate([a.labels for a in samples]), samples[0].tau,
                           np.concatenate([a.gaps for a in samples]), None,
                           all(a.independent for a in samples))


def fit_g2(tasks, tau: float, cfg: TrainConfig, bound_cfg: BoundConfig, label: str = "g2",
           inner_log_std: float = -3.0) -> GaussianG2:
    """Fit a hyper-distribution over generalization classifiers on pooled auxiliary samples."""
    if not tasks:
        raise ConfigError("need at least one task")
    aux = pooled_aux([t.aux.relabel(tau) for t in tasks])
    rng = generator(cfg.seed, label, "pool")
    per = max(cfg.g_pool // len(tasks), 8)
    pool = np.concatenate([_pool_rows(t.f1, t.X, t.y, per, rng, "features") for t in tasks])
    g, _ = train_g(aux, pool, tau, cfg.with_(g_mode="features"), bound_cfg.with_(n_aux=len(tasks)), label=label)
    return GaussianG2(g.q.mu, g.q.log_std, g.sizes, inner_log_std)


def optimize_2o_ml(tasks, new_task, cfg: TrainConfig, bound_cfg: BoundConfig, n_mc: int = 10_000,
                   label: str = "2o-ml"):
    """Grid search over tau for the meta-learned second-order bound.

    Returns (tau, new-task report, transfer report, g2); confidence is split
    over the grid.
    """
    grid = tuple(cfg.tau_grid)
    if not grid:
        raise ConfigError("threshold grid is empty")
    per = bound_cfg.with_(delta=bound_cfg.delta / len(grid))
    best = None
    for tau in grid:
        g2 = fit_g2(tasks, tau, cfg, per, label=f"{label}:{tau}")
        seed = int(generator(cfg.seed, label, "eval").integers(2**31))
        new, transfer = phi_2o_cplx_ml(tasks, g2, new_task, tau, per, n_mc=n_mc, seed=seed)
        if best is None or transfer.total < best[2].total:
            best = (tau, new, transfer, g2)
    return best


def model_select(candidates, X, y, aux_sets, cfg: TrainConfig, bound_cfg: BoundConfig, n_mc: int = 10_000):
    """Pick the candidate with the smallest second-order bound at confidence delta/k.

    Returns (index, per-candidate results).
    """
    k = len(candidates)
    if k < 1:
        raise ConfigError("need at least one candidate")
    sel_cfg = bound_cfg.with_(delta=bound_cfg.delta / k)
    results = []
    for i, f1 in enumerate(candidates):
        results.append(optimize_2o(f1, X, y, aux_sets, cfg, sel_cfg, label=f"select:{i}", n_mc=n_mc))
    totals = [r.report.total for r in results]
    return int(np.argmin(totals)), results


# -- privacy-coupled joint training -------------------------------------------------

@dataclass
class JointResult:
    f1: StochasticClassifier
    g1: GaussianG
    tau: float
    report: BoundReport
    trace: TrainTrace


def joint_private_train(X, y, aux_sets, arch: Arch, beta: float, cfg: TrainConfig, bound_cfg: BoundConfig,
                        label: str = "joint") -> JointResult:
    """Alternate classifier and complexity-classifier updates under tempering.

    Each epoch takes one step on the classifier (ELBO risk surrogate plus the
    firing-rate term evaluated on the tempered classifier) and one step on g
    at the current threshold. The final (g, tau) is re-optimized on the
    tempered classifier.
    """
    if beta <= 0:
        raise ConfigError("temperature must be positive")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    f1 = StochasticClassifier.init(arch, generator(cfg.seed, label, "init"))
    nets = VariationalNets.init(arch, X.shape[1], generator(cfg.seed, label, "nets"))
    g = GaussianG.init(6, generator(cfg.seed, label, "g"))
    tau = cfg.tau_grid[0]
    sigma_h = arch.sigma / math.sqrt(beta)
    f_state = OptimizerState.for_params([f1.theta1, nets.r1], lr=cfg.lr)
    g_state = OptimizerState.for_params([g.q.mu, g.q.log_std], lr=cfg.g_lr)
    f_arrays = [f1.theta1.copy(), nets.r1.copy()]
    g_arrays = [g.q.mu.copy(), g.q.log_std.copy()]
    trace = TrainTrace()
    pg = g.q.mu.size
    n_aux = len(aux_sets)
    for epoch in range(cfg.epochs):
        rng = generator(cfg.seed, label, epoch)
        # classifier block
        ts = [param(a) for a in f_arrays]
        noise = Phi1aNoise.draw(arch, len(y), rng, n_elbo=cfg.n_mc, n_ent=1, k_prior=0)
        elbo, _ = elbo_objective(arch, ts[0], ts[1], nets.r1_sizes, X, y, noise)
        z = rng.standard_normal((cfg.g_draws * 4, arch.d))
        theta0 = arch.hypernet(ts[0], z) + rng.standard_normal((len(z), arch.p0)) * sigma_h
        feats = g_inputs_tensor(f0_features_tensor(theta0, arch.base, X, y, arch.hidden))
        gth = g_arrays[0] + np.exp(g_arrays[1]) * rng.standard_normal((len(z), pg))
        fire = apply_flat(gth, g.sizes, feats.reshape(len(z), 1, 6))[..., 0, 0].sigmoid().mean()
        f_loss = elbo + fire * (1.0 - tau)
        try:
            grads = grad(f_loss, ts)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"{label}: {exc}", trace) from exc
        f_arrays, f_state = optimizer_step(f_state, f_arrays, grads)
        # complexity-classifier block on the tempered classifier
        h = privacy_transform(StochasticClassifier(arch, f_arrays[0]), beta)
        aux = build_aux_sample(h, X, y, aux_sets, tau, rng)
        pool = _pool_rows(h, X, y, max(cfg.g_pool // 5, 20), rng, "features")
        gts = [param(a) for a in g_arrays]
        g_loss, terms = _g_surrogate(gts[0], gts[1], g.sizes, g_rows(aux), aux.labels.astype(float), pool, tau,
                                     n_aux, bound_cfg, rng.standard_normal((cfg.g_draws, pg)),
                                     rng.standard_normal((len(pool), pg)))
        try:
            g_grads = grad(g_loss, gts)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"{label}: {exc}", trace) from exc
        g_arrays, g_state = optimizer_step(g_state, g_arrays, g_grads)
        trace.log(epoch, float(elbo.data) + float(g_loss.data), {"elbo": float(elbo.data), **{k: _value(v) for k, v in terms.items()}},
                  steps=2)
    f1 = StochasticClassifier(arch, f_arrays[0])
    h = privacy_transform(f1, beta)
    res = optimize_2o(h, X, y, aux_sets, cfg, bound_cfg, label=f"{label}:final")
    trace.info.update(kind="joint", beta=beta)
    return JointResult(f1, res.g1, res.tau, res.report, trace)
