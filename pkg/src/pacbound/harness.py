"""Experiment configs, statistics, resumable experiment runs and plot-data export."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .bounds.pac import gibbs_risk
from .bounds.report import BoundConfig, ConfigError
from .bounds.second_order import TAU_GRID, DiscreteG, ThresholdRule, build_aux_sample, phi_2o_cplx
from .data import (bootstrap_aux, gen_cluster_suite, gen_expression_task, gen_prototype_suite,
                   load_csv, load_suite, select_features, split_dataset)
from .discrete import FiniteWorld, TableClassifier, random_world, table_features
from .mass import MassFunction, normalize
from .models import Arch, StochasticClassifier, base_sizes
from .rng import generator
from .training import (TrainConfig, elbo_pretrain, fit_phi1a_nets, model_select, optimize_2o, train_gaussian_meta,
                       train_meta, train_phi1a)

KINDS = ("single-task-compare", "meta-compare", "transfer", "model-select", "validity-frequency")


class RankDeficiencyError(ValueError):
    """A regression design matrix does not have full column rank."""


# -- statistics -----------------------------------------------------------------

def pearson_r(xs, ys) -> tuple[float, float, float]:
    """Sample correlation with two-sided and one-sided (r > 0) p-values from the t transform."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    n = len(x)
    if n != len(y):
        raise ValueError("inputs differ in length")
    if n < 3:
        raise ValueError("need at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("zero variance")
    r = float(np.clip(dx @ dy / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0, 0.0 if r > 0 else 1.0
    t = r * math.sqrt((n - 2) / (1 - r * r))
    return r, float(2 * stats.t.sf(abs(t), n - 2)), float(stats.t.sf(t, n - 2))


def _design(X, n: int) -> np.ndarray:
    X = np.zeros((n, 0)) if X is None else np.asarray(X, dtype=float).reshape(n, -1)
    return np.column_stack([np.ones(n), X])


def nested_f_test(y, X_base, X_extended) -> tuple[float, float]:
    """F test for the columns the extended regression adds; both fits include an intercept.

    Returns (F, upper-tail p). Added columns already in the span of the
    base design give F = 0, p = 1.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    A, B = _design(X_base, n), _design(X_extended, n)
    ra, rb = np.linalg.matrix_rank(A), np.linalg.matrix_rank(B)
    if ra < A.shape[1]:
        raise RankDeficiencyError("base design is rank deficient")
    if rb == ra:
        return 0.0, 1.0
    if rb < B.shape[1]:
        raise RankDeficiencyError("extended design is rank deficient")
    if n <= B.shape[1] + 1:
        raise ValueError("too few observations for the extended model")

    def rss(M):
        coef, *_ = np.linalg.lstsq(M, y, rcond=None)
        res = y - M @ coef
        return float(res @ res)

    rss_a, rss_b = rss(A), rss(B)
    df1, df2 = B.shape[1] - A.shape[1], n - B.shape[1]
    if rss_b <= 1e-300:
        return math.inf, 0.0
    F = max((rss_a - rss_b) / df1, 0.0) / (rss_b / df2)
    return float(F), float(stats.f.sf(F, df1, df2))


def t_test_one_tailed(a, b, paired: bool = False) -> tuple[float, float]:
    """t test of the alternative mean(a) < mean(b); Student's pooled form when unpaired."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two observations per group")
    if paired:
        if len(a) != len(b):
            raise ValueError("paired samples differ in length")
        d = a - b
        if np.all(d == d[0]):
            if d[0] == 0:
                return 0.0, 0.5
            return (-math.inf, 0.0) if d[0] < 0 else (math.inf, 1.0)
        res = stats.ttest_rel(a, b, alternative="less")
    else:
        if np.var(a) == 0 and np.var(b) == 0:
            if a[0] == b[0]:
                return 0.0, 0.5
            return (-math.inf, 0.0) if a[0] < b[0] else (math.inf, 1.0)
        res = stats.ttest_ind(a, b, equal_var=True, alternative="less")
    return float(res.statistic), float(res.pvalue)


# -- configs and reports ----------------------------------------------------------

DEFAULT_OPTIONS = {
    "single-task-compare": {"n_aux": 20, "eval_mc": 1000},
    "meta-compare": {"group_size": 3, "meta_epochs": 200, "gauss_epochs": 200, "eval_mc": 1000,
                     "warm_start": 0, "hyper_warmup": 0},
    "transfer": {"eval_mc": 1000},
    "model-select": {"n_candidates": 10, "k_features": 5, "n_aux": 20, "eval_mc": 1000,
                     "checkpoint_epochs": [5, 10, 20, 40, 80, 120, 160, 240, 320, 480]},
    "validity-frequency": {"n_draws": 200, "rule_thresholds": 9},
}

DEFAULT_DATASETS = {
    "single-task-compare": {"suite": "prototype", "n_datasets": 10, "noise_levels": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]},
    "meta-compare": {"suite": "clusters", "M": 33, "n": 15, "sigma": 0.1,
                     "noise_levels": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]},
    "transfer": {"suite": "clusters", "tasks": 3, "n": 15, "sigma": 0.1},
    "model-select": {"generator": "expression", "n": 188, "d": 200},
    "validity-frequency": {"n_x": 4, "n": 20, "m_aux": 20, "n_tables": 16},
}


@dataclass
class ExperimentConfig:
    kind: str
    seeds: list
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    bound: BoundConfig = field(default_factory=BoundConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    options: dict = field(default_factory=dict)
    out_dir: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        self.dataset = {**DEFAULT_DATASETS[self.kind], **self.dataset}
        self.model = {"hidden": [5, 5], "latent": 2, "sigma": 0.1, **self.model}
        unknown = set(self.options) - set(DEFAULT_OPTIONS[self.kind])
        if unknown:
            raise ConfigError(f"unknown options for {self.kind}: {sorted(unknown)}")
        self.options = {**DEFAULT_OPTIONS[self.kind], **self.options}

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        known = {"kind", "seed", "n_seeds", "seeds", "dataset", "model", "bound", "train", "options", "out_dir"}
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if "kind" not in obj:
            raise ConfigError("config needs a 'kind'")
        if "seeds" in obj:
            seeds = obj["seeds"]
        elif "seed" in obj:
            seeds = [int(obj["seed"]) + i for i in range(int(obj.get("n_seeds", 1)))]
        else:
            raise ConfigError("config needs a top-level 'seed' or a 'seeds' list")
        try:
            bound = BoundConfig(**obj.get("bound", {}))
            train = TrainConfig(**obj.get("train", {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cls(obj["kind"], list(seeds), obj.get("dataset", {}), obj.get("model", {}), bound, train,
                   obj.get("options", {}), obj.get("out_dir"))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_json(obj)

    def to_json(self) -> dict:
        train = asdict(self.train)
        train["tau_grid"] = list(train["tau_grid"])
        return {"kind": self.kind, "seeds": list(self.seeds), "dataset": self.dataset, "model": self.model,
                "bound": self.bound.to_json(), "train": train, "options": self.options}

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ExperimentReport:
    kind: str
    config: dict
    config_hash: str
    records: list
    failures: list
    summary: dict
    cells_requested: int = 0

    def to_json(self) -> dict:
        return _clean({"kind": self.kind, "config_hash": self.config_hash, "config": self.config,
                       "summary": self.summary, "failures": self.failures, "cells_requested": self.cells_requested,
                       "records": self.records})

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_json(), indent=2))
        write_rows(out / "records.csv", self.records)
        return out / "report.json"

    @classmethod
    def load(cls, path) -> "ExperimentReport":
        path = Path(path)
        if path.is_dir():
            path = path / "report.json"
        obj = json.loads(path.read_text())
        return cls(obj["kind"], obj["config"], obj["config_hash"], obj["records"], obj["failures"], obj["summary"],
                   obj.get("cells_requested", 0))


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def write_rows(path, rows) -> None:
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in keys})


# -- shared helpers ------------------------------------------------------------------

def make_arch(model: dict, n_in: int) -> Arch:
    hidden = tuple(model.get("hidden", (5, 5)))
    return Arch(base_sizes(n_in, hidden), tuple(model.get("hyper_hidden", hidden)), int(model.get("latent", 2)),
                float(model.get("sigma", 0.1)))


def _cell_seed(seed: int, *path) -> int:
    return int(generator(seed, "cell", *path).integers(2**31))


def _err(f, S, n_mc, seed) -> float:
    return gibbs_risk(f, S.X, S.y, n_mc, seed)


def _flat_terms(prefix: str, report) -> dict:
    return {f"{prefix}_{k}": float(v) for k, v in report.terms.items()}


# -- single-task comparison ----------------------------------------------------------

def _prototype_suite(cfg: ExperimentConfig, seed: int):
    ds = cfg.dataset
    if "path" in ds:
        return load_suite(ds["path"])
    return gen_prototype_suite(seed, int(ds["n_datasets"]), tuple(ds["noise_levels"]))


def _single_cells(cfg):
    ds = cfg.dataset
    return [{"id": f"s{s}-d{d}-n{lvl:g}", "seed": s, "dataset": d, "noise": float(lvl)}
            for s in cfg.seeds for d in range(int(ds["n_datasets"])) for lvl in ds["noise_levels"]]


def _single_cell(cfg: ExperimentConfig, cell: dict) -> list:
    seed, d, lvl = cell["seed"], cell["dataset"], cell["noise"]
    suite = _prototype_suite(cfg, seed)
    task = [t for t in suite.tasks if t.task_id == d and t.noise == lvl][0]
    arch = make_arch(cfg.model, task.train.dim)
    cs = _cell_seed(seed, d, lvl)
    tc = cfg.train.with_(seed=cs)
    bc = cfg.bound
    mc = cfg.options["eval_mc"]
    prior, _, _ = elbo_pretrain(task.val.X, task.val.y, arch, tc, label="prior")
    post, rep_a, _, _ = train_phi1a(task.train.X, task.train.y, prior, tc, bc)
    f1, _, _ = elbo_pretrain(task.train.X, task.train.y, arch, tc, label="f1")
    aux = bootstrap_aux(task.val, int(cfg.options["n_aux"]), generator(cs, "aux"))
    res = optimize_2o(f1, task.train.X, task.train.y, [a.pair() for a in aux], tc, bc.with_(n_aux=len(aux)))
    rec = {"seed": seed, "dataset": d, "noise": lvl,
           "train_error_phi1a": _err(post, task.train, mc, 1), "val_error_phi1a": _err(post, task.val, mc, 2),
           "test_error_phi1a": _err(post, task.test, mc, 3), "phi1a": rep_a.total,
           "train_error_2o": _err(f1, task.train, mc, 4), "val_error_2o": _err(f1, task.val, mc, 5),
           "test_error_2o": _err(f1, task.test, mc, 6), "phi2o": res.report.total, "tau": res.tau}
    rec.update(_flat_terms("phi1a", rep_a))
    rec.update(_flat_terms("phi2o", res.report))
    return [rec]


def _corr_block(records, bound_key, err_key, by="seed") -> dict:
    out = {}
    per = []
    for s in sorted({r[by] for r in records}):
        rs = [r for r in records if r[by] == s]
        if len(rs) >= 3:
            try:
                per.append(pearson_r([r[bound_key] for r in rs], [r[err_key] for r in rs])[0])
            except ValueError:
                pass
    out["r_per_seed"] = per
    out["r_mean"] = float(np.mean(per)) if per else math.nan
    try:
        r, p2, p1 = pearson_r([r[bound_key] for r in records], [r[err_key] for r in records])
        out.update(r_pooled=r, p_two_sided=p2, p_one_sided=p1)
    except ValueError:
        pass
    return out


def _f_block(records, err_key, base_keys, bound_key) -> dict:
    out = {}
    y = [r[err_key] for r in records]
    for bk in base_keys:
        base = np.array([[r[bk]] for r in records])
        ext = np.column_stack([base, [r[bound_key] for r in records]])
        try:
            F, p = nested_f_test(y, base, ext)
            out[f"vs_{bk}"] = {"F": F, "p": p}
        except (ValueError, np.linalg.LinAlgError) as exc:
            out[f"vs_{bk}"] = {"error": str(exc)}
    return out


def _single_summary(cfg, records) -> dict:
    return {"phi1a": {**_corr_block(records, "phi1a", "test_error_phi1a"),
                      "f_test": _f_block(records, "test_error_phi1a", ["train_error_phi1a", "val_error_phi1a"],
                                         "phi1a")},
            "phi2o": {**_corr_block(records, "phi2o", "test_error_2o"),
                      "f_test": _f_block(records, "test_error_2o", ["train_error_2o", "val_error_2o"], "phi2o")}}


# -- meta-learning comparison -----------------------------------------------------------

def _cluster_suite(cfg, seed):
    ds = cfg.dataset
    if "path" in ds:
        return load_suite(ds["path"])
    return gen_cluster_suite(seed, int(ds["M"]), int(ds["n"]), float(ds["sigma"]), tuple(ds["noise_levels"]))


def _meta_cells(cfg):
    return [{"id": f"s{s}-n{lvl:g}", "seed": s, "noise": float(lvl)}
            for s in cfg.seeds for lvl in cfg.dataset["noise_levels"]]


def _meta_cell(cfg: ExperimentConfig, cell: dict) -> list:
    seed, lvl = cell["seed"], cell["noise"]
    tasks = _cluster_suite(cfg, seed).at_noise(lvl)
    arch = make_arch(cfg.model, tasks[0].train.dim)
    cs = _cell_seed(seed, lvl)
    tc = cfg.train.with_(seed=cs)
    bc = cfg.bound
    opt = cfg.options
    mc = opt["eval_mc"]
    recs = []
    # single level: prior on the training partition, posterior on the validation partition
    for i, t in enumerate(tasks):
        ti = tc.with_(seed=_cell_seed(cs, "task", i))
        prior, _, _ = elbo_pretrain(t.train.X, t.train.y, arch, ti, label="prior")
        post, rep, _, _ = train_phi1a(t.val.X, t.val.y, prior, ti, bc)
        recs.append({"seed": seed, "noise": lvl, "task": t.task_id, "single_bound": rep.total,
                     "single_train_error": _err(post, t.val, mc, 1), "single_test_error": _err(post, t.test, mc, 2)})
    # meta-learning on the validation partitions
    val_sets = [t.val.pair() for t in tasks]
    meta = train_meta(val_sets, arch, tc.with_(epochs=int(opt["meta_epochs"])), bc, group_size=int(opt["group_size"]),
                      warm_start=int(opt["warm_start"]), hyper_warmup=int(opt["hyper_warmup"]))
    gauss = train_gaussian_meta(val_sets, arch.base, tc.with_(epochs=int(opt["gauss_epochs"])), bc,
                                group_size=int(opt["group_size"]))
    elbos = meta.report.diagnostics["task_elbos"]
    comps = meta.report.diagnostics["task_complexities"]
    hyper = meta.report.terms["hyper_complexity"]
    for i, (t, rec) in enumerate(zip(tasks, recs)):
        ml_test = _err(meta.posteriors[i], t.test, mc, 3)
        g_test = _err(gauss.posteriors[i], t.test, mc, 4)
        rec.update({"ml_bound": elbos[i] + comps[i] + hyper, "ml_task_elbo": elbos[i], "ml_task_complexity": comps[i],
                    "ml_train_error": _err(meta.posteriors[i], t.val, mc, 5), "ml_test_error": ml_test,
                    "dpp_accuracy": 1 - ml_test, "gauss_test_error": g_test, "gauss_accuracy": 1 - g_test,
                    "meta_bound_total": meta.report.total, "gauss_bound_total": gauss.report.total})
    return recs


def _meta_summary(cfg, records) -> dict:
    dpp = [r["dpp_accuracy"] for r in records]
    gau = [r["gauss_accuracy"] for r in records]
    out = {"ml": {**_corr_block(records, "ml_bound", "ml_test_error"),
                  "f_test": _f_block(records, "ml_test_error", ["ml_train_error"], "ml_bound")},
           "single": {**_corr_block(records, "single_bound", "single_test_error"),
                      "f_test": _f_block(records, "single_test_error", ["single_train_error"], "single_bound")},
           "dpp_mean_accuracy": float(np.mean(dpp)), "gauss_mean_accuracy": float(np.mean(gau))}
    if len(dpp) >= 2:
        t, p = t_test_one_tailed(gau, dpp, paired=True)
        out["accuracy_t_test"] = {"t": t, "p": p, "alternative": "gauss < dpp"}
    return out


# -- transfer ----------------------------------------------------------------------------

def _transfer_tasks(cfg, seed):
    ds = cfg.dataset
    if "csv" in ds:
        out = []
        for i, path in enumerate(ds["csv"]):
            S = load_csv(path)
            out.append(split_dataset(S, (0.45, 0.45, 0.1), _cell_seed(seed, "split", i)))
        return out
    suite = gen_cluster_suite(seed, int(ds["tasks"]), int(ds["n"]), float(ds["sigma"]))
    return [(t.train, t.val, t.test) for t in suite.tasks]


def _transfer_cells(cfg):
    return [{"id": f"s{s}", "seed": s} for s in cfg.seeds]


def _transfer_cell(cfg: ExperimentConfig, cell: dict) -> list:
    seed = cell["seed"]
    tasks = _transfer_tasks(cfg, seed)
    arch = make_arch(cfg.model, tasks[0][0].dim)
    mc = cfg.options["eval_mc"]
    recs = []
    priors = []
    for i, (tr, _, _) in enumerate(tasks):
        tc = cfg.train.with_(seed=_cell_seed(seed, "prior", i))
        priors.append(elbo_pretrain(tr.X, tr.y, arch, tc, label="prior")[0])
    baseline = StochasticClassifier.init(arch, generator(seed, "baseline-prior"))
    for j, (_, va, te) in enumerate(tasks):
        for i, prior in [(-1, baseline)] + list(enumerate(priors)):
            tc = cfg.train.with_(seed=_cell_seed(seed, "post", i, j))
            post, rep, _, _ = train_phi1a(va.X, va.y, prior, tc, cfg.bound)
            test = _err(post, te, mc, 7)
            recs.append({"seed": seed, "prior_task": i, "posterior_task": j, "bound": rep.total,
                         "test_error": test, "accuracy": 1 - test})
    return recs


def _transfer_summary(cfg, records) -> dict:
    out = {}
    for j in sorted({r["posterior_task"] for r in records}):
        base = sorted((r for r in records if r["posterior_task"] == j and r["prior_task"] == -1),
                      key=lambda r: r["seed"])
        for i in sorted({r["prior_task"] for r in records if r["prior_task"] >= 0}):
            rows = sorted((r for r in records if r["posterior_task"] == j and r["prior_task"] == i),
                          key=lambda r: r["seed"])
            entry = {"mean_accuracy": float(np.mean([r["accuracy"] for r in rows])),
                     "baseline_accuracy": float(np.mean([r["accuracy"] for r in base]))}
            if len(rows) >= 2 and len(rows) == len(base):
                entry["t"], entry["p"] = t_test_one_tailed([r["accuracy"] for r in base],
                                                           [r["accuracy"] for r in rows], paired=True)
            out[f"prior{i}->task{j}"] = entry
    return out


# -- model selection ----------------------------------------------------------------------

def _select_cells(cfg):
    return [{"id": f"s{s}", "seed": s} for s in cfg.seeds]


def _select_data(cfg, seed):
    ds = cfg.dataset
    if "csv" in ds:
        S = load_csv(ds["csv"])
    else:
        S = gen_expression_task(int(ds.get("data_seed", 0)), int(ds["n"]), int(ds["d"]))
    tr, va, te = split_dataset(S, tuple(ds.get("fractions", (0.45, 0.45, 0.1))), _cell_seed(seed, "split"))
    cols = select_features(tr, int(cfg.options["k_features"]))
    mu, sd = tr.X[:, cols].mean(0), tr.X[:, cols].std(0) + 1e-12
    scale = lambda S: type(S)((S.X[:, cols] - mu) / sd, S.y, S.provenance)  # noqa: E731
    return scale(tr), scale(va), scale(te), cols


def _select_cell(cfg: ExperimentConfig, cell: dict) -> list:
    seed = cell["seed"]
    opt = cfg.options
    tr, va, te, cols = _select_data(cfg, seed)
    arch = make_arch(cfg.model, tr.dim)
    cs = _cell_seed(seed, "select")
    mc = opt["eval_mc"]
    epochs = sorted(int(e) for e in opt["checkpoint_epochs"])[: int(opt["n_candidates"])]
    tc = cfg.train.with_(seed=cs)
    # candidates: checkpoints along one ELBO optimization path on the training partition
    f1 = None
    cands, done = [], 0
    for e in epochs:
        f1, _, _ = elbo_pretrain(tr.X, tr.y, arch, tc.with_(epochs=e - done, seed=_cell_seed(cs, "path", e)),
                                 init=f1, label="path")
        done = e
        cands.append(f1)
    prior, _, _ = elbo_pretrain(va.X, va.y, arch, tc, label="prior")
    phi1a_vals = [fit_phi1a_nets(c, tr.X, tr.y, prior, tc, cfg.bound)[0].total for c in cands]
    aux = bootstrap_aux(va, int(opt["n_aux"]), generator(cs, "aux"))
    best, results = model_select(cands, tr.X, tr.y, [a.pair() for a in aux], tc, cfg.bound.with_(n_aux=len(aux)))
    tests = [_err(c, te, mc, 11) for c in cands]
    order = np.argsort(tests, kind="stable")
    ranks = np.empty(len(tests), dtype=int)
    ranks[order] = np.arange(1, len(tests) + 1)
    sel_a = int(np.argmin(phi1a_vals))
    recs = []
    for k, c in enumerate(cands):
        recs.append({"seed": seed, "candidate": k, "epoch": epochs[k], "test_error": tests[k], "true_rank": int(ranks[k]),
                     "train_error": _err(c, tr, mc, 12), "phi1a": phi1a_vals[k], "phi2o": results[k].report.total,
                     "selected_2o": int(k == best), "selected_phi1a": int(k == sel_a), "features": " ".join(map(str, cols))})
    return recs


def _select_summary(cfg, records) -> dict:
    seeds = sorted({r["seed"] for r in records})
    top3, err_2o, err_a = [], [], []
    for s in seeds:
        rs = [r for r in records if r["seed"] == s]
        chosen = [r for r in rs if r["selected_2o"]][0]
        chosen_a = [r for r in rs if r["selected_phi1a"]][0]
        top3.append(chosen["true_rank"] <= 3)
        err_2o.append(chosen["test_error"])
        err_a.append(chosen_a["test_error"])
    out = {"top3_fraction_2o": float(np.mean(top3)),
           "top3_fraction_phi1a": float(np.mean([[r for r in records if r["seed"] == s and r["selected_phi1a"]][0]
                                                 ["true_rank"] <= 3 for s in seeds])),
           "mean_test_error_2o_selected": float(np.mean(err_2o)),
           "mean_test_error_phi1a_selected": float(np.mean(err_a)), "trials": len(seeds)}
    for key in ("phi1a", "phi2o"):
        out[key] = _corr_block(records, key, "test_error")
        lo, hi = _rank_split(records, key)
        if len(lo) >= 2 and len(hi) >= 2:
            out[key]["rank_split_t"], out[key]["rank_split_p"] = t_test_one_tailed(lo, hi)
    return out


def _rank_split(records, key) -> tuple[list, list]:
    """Normalized bound values for the better half of true ranks versus the worse half."""
    lo, hi = [], []
    for s in sorted({r["seed"] for r in records}):
        rs = [r for r in records if r["seed"] == s]
        mean = np.mean([r[key] for r in rs])
        half = len(rs) / 2
        for r in rs:
            (lo if r["true_rank"] <= half else hi).append(r[key] / mean)
    return lo, hi


# -- validity frequency on a finite world --------------------------------------------------

def tiny_world(seed: int = 0, n_x: int = 4) -> FiniteWorld:
    return random_world(generator(seed, "tiny-world"), n_x)


def table_family(n_x: int, levels=(0.2, 0.8)) -> list:
    grids = np.array(np.meshgrid(*[levels] * n_x, indexing="ij")).reshape(n_x, -1).T
    return sorted(TableClassifier(tuple(float(v) for v in row)) for row in grids)


def gibbs_posterior(tables, X, y, temperature: float = 1.0) -> MassFunction:
    """Masses proportional to ``exp(-temperature * N * soft risk)`` under a uniform prior."""
    risks = np.array([gibbs_risk(t, X, y) for t in tables])
    w = np.exp(-temperature * len(y) * (risks - risks.min()))
    return normalize(dict(zip(tables, w)))


def rule_family(feature_rows: np.ndarray, n_thresholds: int = 9) -> list:
    """Threshold rules on every feature at quantiles of the candidate classifiers' features."""
    rules = []
    qs = np.linspace(0.05, 0.95, n_thresholds)
    for j in range(feature_rows.shape[1]):
        for t in np.unique(np.round(np.quantile(feature_rows[:, j], qs), 6)):
            rules += [ThresholdRule(j, float(t), 1), ThresholdRule(j, float(t), -1)]
    return sorted(set(rules))


def fit_discrete_g(rules, prior: MassFunction, aux, lam: float) -> DiscreteG:
    """Gibbs posterior over rules from their auxiliary-sample error."""
    errs = np.array([(r(aux.features) != aux.labels).mean() for r in rules])
    logw = np.array([math.log(prior.prob(r)) for r in rules]) - lam * errs
    w = np.exp(logw - logw.max())
    return DiscreteG(normalize(dict(zip(rules, w))), prior)


def validity_trial(world: FiniteWorld, tables, rules, seed, cfg: BoundConfig, n: int, m_aux: int,
                   grid=TAU_GRID) -> dict:
    """One draw: train on a fresh sample, optimize (g, tau) over the grid, compare with the exact true risk."""
    rng = generator(seed, "trial")
    X, y = world.sample(n, rng)
    f1 = gibbs_posterior(tables, X, y)
    aux_sets = [world.sample(m_aux, rng) for _ in range(cfg.n_aux)]
    aux0 = build_aux_sample(f1, X, y, aux_sets, grid[0], rng)
    prior = MassFunction.uniform(rules)
    per = cfg.with_(delta=cfg.delta / len(grid))
    best = None
    for tau in grid:
        aux = aux0.relabel(tau)
        g = fit_discrete_g(rules, prior, aux, cfg.lam)
        rep = phi_2o_cplx(f1, X, y, g, tau, aux, per, seed=int(rng.integers(2**31)))
        if best is None or rep.total < best.total:
            best = rep
    true = world.true_risk(f1)
    return {"bound": best.total, "true_risk": true, "empirical_risk": best.terms["empirical_risk"],
            "tau": best.terms["tau"], "risk_tau": best.terms["risk_tau"], "eta": best.terms["eta"],
            "p1": best.terms["p1"], "violated": int(true > best.total)}


def _validity_cells(cfg):
    return [{"id": f"s{s}", "seed": s} for s in cfg.seeds]


def _validity_cell(cfg: ExperimentConfig, cell: dict) -> list:
    ds, opt = cfg.dataset, cfg.options
    world = tiny_world(int(ds.get("world_seed", 0)), int(ds["n_x"]))
    tables = table_family(world.n_x)
    Xr, yr = world.sample(int(ds["n"]), generator(int(ds.get("world_seed", 0)), "reference"))
    feats = np.stack([table_features(t, Xr, yr) for t in tables])
    rules = rule_family(feats, int(opt["rule_thresholds"]))
    recs = []
    for k in range(int(opt["n_draws"])):
        rec = validity_trial(world, tables, rules, _cell_seed(cell["seed"], "draw", k), cfg.bound, int(ds["n"]),
                             int(ds["m_aux"]), tuple(cfg.train.tau_grid))
        recs.append({"seed": cell["seed"], "draw": k, **rec})
    return recs


def _validity_summary(cfg, records) -> dict:
    v = [r["violated"] for r in records]
    return {"violation_rate": float(np.mean(v)), "draws": len(v), "mean_bound": float(np.mean([r["bound"] for r in records])),
            "mean_true_risk": float(np.mean([r["true_risk"] for r in records])),
            "mean_gap": float(np.mean([r["bound"] - r["true_risk"] for r in records]))}


RUNNERS = {
    "single-task-compare": (_single_cells, _single_cell, _single_summary),
    "meta-compare": (_meta_cells, _meta_cell, _meta_summary),
    "transfer": (_transfer_cells, _transfer_cell, _transfer_summary),
    "model-select": (_select_cells, _select_cell, _select_summary),
    "validity-frequency": (_validity_cells, _validity_cell, _validity_summary),
}


def _run_one(cfg: ExperimentConfig, cell: dict, cell_dir: Path | None) -> dict:
    if cell_dir is not None:
        path = cell_dir / f"{cell['id']}.json"
        if path.exists():
            saved = json.loads(path.read_text())
            if saved.get("config_hash") == cfg.hash and saved.get("error") is None:
                return saved
    _, fn, _ = RUNNERS[cfg.kind]
    try:
        out = {"cell": cell["id"], "config_hash": cfg.hash, "records": fn(cfg, cell), "error": None}
    except Exception as exc:  # one failed cell must not abort the sweep
        out = {"cell": cell["id"], "config_hash": cfg.hash, "records": [],
               "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()}
    if cell_dir is not None:
        (cell_dir / f"{cell['id']}.json").write_text(json.dumps(_clean(out)))
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int = 1, log=None) -> ExperimentReport:
    """Run every cell of an experiment, reusing finished cells found under ``out_dir``."""
    out_dir = out_dir or cfg.out_dir
    cells_fn, _, summary_fn = RUNNERS[cfg.kind]
    cells = cells_fn(cfg)
    cell_dir = None
    if out_dir is not None:
        cell_dir = Path(out_dir) / "cells"
        cell_dir.mkdir(parents=True, exist_ok=True)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, [cfg] * len(cells), cells, [cell_dir] * len(cells)))
    else:
        results = []
        for i, c in enumerate(cells):
            results.append(_run_one(cfg, c, cell_dir))
            if log:
                log(f"[{i + 1}/{len(cells)}] {c['id']}" + (f" failed: {results[-1]['error']}"
                                                           if results[-1]["error"] else ""))
    records = [r for res in results for r in res["records"]]
    failures = [{"cell": res["cell"], "error": res["error"]} for res in results if res["error"]]
    try:
        summary = summary_fn(cfg, records) if records else {}
    except (ValueError, IndexError) as exc:
        summary = {"error": str(exc)}
    report = ExperimentReport(cfg.kind, cfg.to_json(), cfg.hash, records, failures, _clean(summary), len(cells))
    if out_dir is not None:
        report.save(out_dir)
    return report


# -- plot data ---------------------------------------------------------------------------

PLOT_PAIRS = {
    "single-task-compare": [("phi1a", "phi1a", "test_error_phi1a", "seed"), ("phi2o", "phi2o", "test_error_2o", "seed")],
    "meta-compare": [("single", "single_bound", "single_test_error", "seed"),
                     ("ml", "ml_bound", "ml_test_error", "seed")],
    "transfer": [("transfer", "bound", "test_error", "seed")],
    "model-select": [("phi1a", "phi1a", "test_error", "seed"), ("phi2o", "phi2o", "test_error", "seed")],
    "validity-frequency": [("validity", "bound", "true_risk", "seed")],
}


def emit_plot_data(report: ExperimentReport, out_dir) -> dict:
    """Write scatter, normalized-rank and quartile tables for each bound of the report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, bkey, ekey, group in PLOT_PAIRS[report.kind]:
        recs = [r for r in report.records if _finite(r.get(bkey)) and _finite(r.get(ekey))]
        scatter = [{"x_bound": r[bkey], "y_test_error": r[ekey], "group": r.get(group, ""),
                    "noise": r.get("noise", "")} for r in recs]
        p = out / f"scatter_{name}.csv"
        write_rows(p, scatter)
        paths[f"scatter_{name}"] = p
        rank_rows = []
        for g in sorted({r.get(group) for r in recs}, key=str):
            rs = sorted([r for r in recs if r.get(group) == g], key=lambda r: r[ekey])
            mean = np.mean([r[bkey] for r in rs])
            for k, r in enumerate(rs, start=1):
                rank_rows.append({"group": g, "rank": k, "test_error": r[ekey], "bound": r[bkey],
                                  "normalized_bound": r[bkey] / mean if mean else math.nan})
        p = out / f"rank_{name}.csv"
        write_rows(p, rank_rows)
        paths[f"rank_{name}"] = p
        quart = []
        for k in sorted({r["rank"] for r in rank_rows}):
            vals = [r["normalized_bound"] for r in rank_rows if r["rank"] == k]
            q1, med, q3 = np.quantile(vals, [0.25, 0.5, 0.75])
            quart.append({"rank": k, "q1": q1, "median": med, "q3": q3, "n": len(vals)})
        p = out / f"quartiles_{name}.csv"
        write_rows(p, quart)
        paths[f"quartiles_{name}"] = p
    return paths


def _finite(v) -> bool:
    try:
        return math.isfinite(float(v))
    except (TypeError, ValueError):
        return False


def render_figures(report: ExperimentReport, out_dir) -> list:
    """Scatter of bound against test error and normalized-rank plots, one PNG per bound."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, bkey, ekey, group in PLOT_PAIRS[report.kind]:
        recs = [r for r in report.records if _finite(r.get(bkey)) and _finite(r.get(ekey))]
        if not recs:
            continue
        fig, ax = plt.subplots(figsize=(4, 3.2))
        x = np.array([float(r[bkey]) for r in recs])
        y = np.array([float(r[ekey]) for r in recs])
        c = [float(r["noise"]) if _finite(r.get("noise")) else 0.0 for r in recs]
        sc = ax.scatter(x, y, c=c, s=12, cmap="viridis")
        if "noise" in recs[0]:
            fig.colorbar(sc, ax=ax, label="label noise")
        if len(recs) >= 3 and np.std(x) > 0 and np.std(y) > 0:
            ax.set_title(f"{name}: r = {pearson_r(x, y)[0]:.2f}")
        ax.set_xlabel("bound")
        ax.set_ylabel(ekey.replace("_", " "))
        fig.tight_layout()
        p = out / f"scatter_{name}.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        files.append(p)
        ranks = {}
        for g in {r.get(group) for r in recs}:
            rs = sorted([r for r in recs if r.get(group) == g], key=lambda r: float(r[ekey]))
            mean = np.mean([float(r[bkey]) for r in rs])
            for k, r in enumerate(rs, start=1):
                ranks.setdefault(k, []).append(float(r[bkey]) / mean)
        if len(ranks) > 1 and len(ranks) <= 50:
            fig, ax = plt.subplots(figsize=(4, 3.2))
            ks = sorted(ranks)
            med = [np.median(ranks[k]) for k in ks]
            lo = [med[i] - np.quantile(ranks[k], 0.25) for i, k in enumerate(ks)]
            hi = [np.quantile(ranks[k], 0.75) - med[i] for i, k in enumerate(ks)]
            ax.errorbar(ks, med, yerr=[lo, hi], fmt="o-", ms=3)
            ax.set_xlabel("true rank (test error)")
            ax.set_ylabel("bound / group mean")
            fig.tight_layout()
            p = out / f"rank_{name}.png"
            fig.savefig(p, dpi=120)
            plt.close(fig)
            files.append(p)
    return files
