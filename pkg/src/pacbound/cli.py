"""Command line entry point: data generation, training, bound evaluation, experiments and reports."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bounds.pac import gibbs_risk, phi1, phi2_meta
from .bounds.report import BoundConfig, BoundReport, ConfigError
from .bounds.second_order import MetaTask, build_aux_sample
from .bounds.variational import VariationalNets, phi1a, phi2b_variational
from .data import (LabeledDataset, ParseError, bootstrap_aux, gen_cluster_suite, gen_expression_task,
                   gen_prototype_suite, load_csv, load_suite, save_csv, save_suite)
from .harness import ExperimentConfig, ExperimentReport, emit_plot_data, make_arch, render_figures, run_experiment
from .models import load_model, save_model
from .rng import generator
from .training import (TrainConfig, TrainingDiverged, elbo_pretrain, fit_phi1a_nets, optimize_2o, optimize_2o_ml,
                       train_meta, train_phi1a)

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _configs(obj: dict) -> tuple[TrainConfig, BoundConfig]:
    seed = int(obj.get("seed", 0))
    try:
        train = TrainConfig(**{**obj.get("train", {}), "seed": seed})
        bound = BoundConfig(**obj.get("bound", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return train, bound


def _dataset(base: Path, obj: dict, key: str) -> LabeledDataset:
    if key not in obj:
        raise ConfigError(f"config needs data.{key}")
    return load_csv(_resolve(base, obj[key]))


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    levels = tuple(args.noise_levels) if args.noise_levels else None
    if args.suite == "prototype":
        suite = gen_prototype_suite(args.seed, **({"noise_levels": levels} if levels else {}))
    elif args.suite == "clusters":
        suite = gen_cluster_suite(args.seed, noise_levels=levels or (0.0, 0.2, 0.4, 0.6, 0.8, 1.0))
    else:
        out.mkdir(parents=True, exist_ok=True)
        save_csv(gen_expression_task(args.seed), out / "expression.csv")
        print(out / "expression.csv")
        return EXIT_OK
    print(save_suite(suite, out))
    return EXIT_OK


def cmd_train(args) -> int:
    """Train one model as described by a JSON config; writes model, trace and report files."""
    path = Path(args.config)
    obj = _read_json(path)
    base = path.parent
    task = obj.get("task")
    tc, bc = _configs(obj)
    data = obj.get("data", {})
    out = _resolve(base, obj.get("out", "train-out"))
    out.mkdir(parents=True, exist_ok=True)
    if task in ("elbo", "phi1a", "2o"):
        train = _dataset(base, data, "train")
        arch = make_arch(obj.get("model", {}), train.dim)
        if task == "elbo":
            f1, trace, nets = elbo_pretrain(train.X, train.y, arch, tc)
            report = None
        elif task == "phi1a":
            if "prior" not in obj:
                raise ConfigError("phi1a training needs a 'prior' model file")
            prior = load_model(_resolve(base, obj["prior"]))
            f1, report, trace, nets = train_phi1a(train.X, train.y, prior, tc, bc)
        else:
            f1, trace, nets = elbo_pretrain(train.X, train.y, arch, tc)
            val = _dataset(base, data, "val")
            aux = bootstrap_aux(val, bc.n_aux, generator(tc.seed, "aux"))
            res = optimize_2o(f1, train.X, train.y, [a.pair() for a in aux], tc, bc)
            report = res.report
            (out / "g1.json").write_text(json.dumps(res.g1.to_json()))
        save_model(f1, out / "model.json")
        (out / "nets.json").write_text(json.dumps(nets.to_json()))
    elif task == "meta":
        suite = load_suite(_resolve(base, data["suite"])) if "suite" in data else None
        if suite is None:
            raise ConfigError("meta training needs data.suite (a manifest)")
        level = float(data.get("noise", suite.noise_levels[0]))
        part = data.get("partition", "val")
        tasks = [getattr(t, part).pair() for t in suite.at_noise(level)]
        arch = make_arch(obj.get("model", {}), tasks[0][0].shape[1])
        res = train_meta(tasks, arch, tc, bc, group_size=int(obj.get("group_size", 3)))
        save_model(res.hyper_posterior, out / "hyper_posterior.json")
        save_model(res.hyper_prior, out / "hyper_prior.json")
        for i, p in enumerate(res.posteriors):
            save_model(p, out / f"posterior_{i:03d}.json")
        (out / "nets.json").write_text(json.dumps(res.nets.to_json()))
        trace, report = res.trace, res.report
    else:
        raise ConfigError("train config 'task' must be one of elbo, phi1a, 2o, meta")
    trace.save(out / "trace.jsonl")
    if report is not None:
        (out / "report.json").write_text(report.dumps())
        print(report.dumps())
    print(f"wrote {out}")
    return EXIT_OK


def _bound_phi1(obj, base, tc, bc) -> BoundReport:
    if "risk" in obj:
        return phi1(float(obj["risk"]), float(obj["kl"]), bc.with_(n=int(obj["n"])))
    train = _dataset(base, obj.get("data", {}), "train")
    f1 = load_model(_resolve(base, obj["model"]))
    prior = load_model(_resolve(base, obj["prior"]))
    rep, _ = fit_phi1a_nets(f1, train.X, train.y, prior, tc, bc)
    kl_upper = rep.terms["entropy_bound"] + rep.terms["cross_entropy"]
    risk = gibbs_risk(f1, train.X, train.y, tc.eval_mc, tc.seed)
    return phi1(risk, kl_upper, bc.with_(n=len(train)), seeds=[tc.seed])


def _bound_phi1a(obj, base, tc, bc) -> BoundReport:
    train = _dataset(base, obj.get("data", {}), "train")
    f1 = load_model(_resolve(base, obj["model"]))
    prior = load_model(_resolve(base, obj["prior"]))
    if "nets" in obj:
        nets = VariationalNets.from_json(json.loads(_resolve(base, obj["nets"]).read_text()))
        return phi1a(f1, prior, train.X, train.y, nets, bc, n_mc=tc.eval_mc, seed=tc.seed)
    return fit_phi1a_nets(f1, train.X, train.y, prior, tc, bc)[0]


def _bound_phi2(obj, base, tc, bc) -> BoundReport:
    return phi2_meta(float(obj["kl_hyper"]), obj["task_kls"], obj["task_risks"], obj["task_sizes"], bc)


def _bound_phi2b(obj, base, tc, bc) -> BoundReport:
    mdir = _resolve(base, obj["meta"])
    suite = load_suite(_resolve(base, obj["data"]["suite"]))
    level = float(obj["data"].get("noise", suite.noise_levels[0]))
    part = obj["data"].get("partition", "val")
    tasks = [getattr(t, part).pair() for t in suite.at_noise(level)]
    f2 = load_model(mdir / "hyper_posterior.json")
    f2_pi = load_model(mdir / "hyper_prior.json")
    posts = [load_model(mdir / f"posterior_{i:03d}.json") for i in range(len(tasks))]
    nets = VariationalNets.from_json(json.loads((mdir / "nets.json").read_text()))
    return phi2b_variational(f2, f2_pi, posts, tasks, nets, bc, seed=tc.seed)


def _bound_2o(obj, base, tc, bc) -> BoundReport:
    data = obj.get("data", {})
    train = _dataset(base, data, "train")
    val = _dataset(base, data, "val")
    f1 = load_model(_resolve(base, obj["model"]))
    aux = bootstrap_aux(val, bc.n_aux, generator(tc.seed, "aux"))
    return optimize_2o(f1, train.X, train.y, [a.pair() for a in aux], tc, bc).report


def _bound_2o_ml(obj, base, tc, bc) -> BoundReport:
    specs = obj.get("tasks", [])
    if len(specs) < 2:
        raise ConfigError("2o-ml needs at least two tasks (the last one is the new task)")
    metas = []
    for i, spec in enumerate(specs):
        train, val = _dataset(base, spec, "train"), _dataset(base, spec, "val")
        arch = make_arch(obj.get("model", {}), train.dim)
        f1, _, _ = elbo_pretrain(train.X, train.y, arch, tc.with_(seed=tc.seed + i))
        aux_sets = [a.pair() for a in bootstrap_aux(val, bc.n_aux, generator(tc.seed, "aux", i))]
        aux = build_aux_sample(f1, train.X, train.y, aux_sets, 0.0, generator(tc.seed, "draws", i))
        metas.append(MetaTask(f1, train.X, train.y, aux, gibbs_risk(f1, train.X, train.y, tc.eval_mc, tc.seed)))
    tau, new, transfer, _ = optimize_2o_ml(metas[:-1], metas[-1], tc, bc)
    new.diagnostics["transfer_bound"] = transfer.total
    new.diagnostics["transfer_terms"] = transfer.terms
    return new


BOUNDS = {"phi1": _bound_phi1, "phi1a": _bound_phi1a, "phi2": _bound_phi2, "phi2b": _bound_phi2b,
          "2o": _bound_2o, "2o-ml": _bound_2o_ml}


def cmd_bound(args) -> int:
    path = Path(args.config)
    obj = _read_json(path)
    tc, bc = _configs(obj)
    try:
        report = BOUNDS[args.kind](obj, path.parent, tc, bc)
    except KeyError as exc:
        raise ConfigError(f"config is missing {exc}") from None
    print(report.dumps())
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = Path(args.out)
    report = run_experiment(cfg, out, workers=args.workers, log=lambda m: print(m, file=sys.stderr, flush=True))
    emit_plot_data(report, out / "plots")
    print(json.dumps(report.summary, indent=2))
    if report.failures:
        print(f"{len(report.failures)} of {report.cells_requested} cells failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.inp)
    if not (src / "report.json").exists() and not src.is_file():
        raise ConfigError(f"no report.json under {src}")
    report = ExperimentReport.load(src)
    out = Path(args.out) if args.out else (src if src.is_dir() else src.parent) / "plots"
    paths = emit_plot_data(report, out)
    for p in paths.values():
        print(p)
    if args.figures:
        for p in render_figures(report, out):
            print(p)
    print(json.dumps(report.summary, indent=2))
    return EXIT_PARTIAL if report.failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pacbound", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", help="generate a synthetic task suite as CSV files plus a manifest")
    p.add_argument("--suite", choices=("prototype", "clusters", "expression"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--noise-levels", type=float, nargs="*")
    p.set_defaults(func=cmd_gen_data)
    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("bound", help="evaluate a bound from a JSON config")
    p.add_argument("--kind", choices=tuple(BOUNDS), required=True)
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_bound)
    p = sub.add_parser("experiment", help="run an experiment sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_experiment)
    p = sub.add_parser("report", help="export plot tables (and figures) from an experiment directory")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out")
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
