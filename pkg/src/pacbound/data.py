"""Synthetic task generators, label noise, resampling and CSV ingestion."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .rng import generator

CLUSTER_CENTERS = np.array([[-1, -1], [-1, 0], [-1, 1], [0, -1], [0, 1], [1, -1], [1, 0], [1, 1]], dtype=float)


class ParseError(ValueError):
    """Malformed CSV input; the message names the offending line."""


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=int).ravel()
        if len(self.X) != len(self.y):
            raise ValueError(f"{len(self.X)} input rows but {len(self.y)} labels")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("inputs must be finite")
        if not np.isin(self.y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, provenance: str | None = None) -> "LabeledDataset":
        return LabeledDataset(self.X[idx], self.y[idx], self.provenance if provenance is None else provenance)

    def columns(self, cols) -> "LabeledDataset":
        return LabeledDataset(self.X[:, list(cols)], self.y, self.provenance)

    def pair(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X, self.y


@dataclass
class Task:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    noise: float = 0.0
    task_id: int = 0
    aux: list = field(default_factory=list)


@dataclass
class TaskSuite:
    tasks: list
    name: str = ""
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def noise_levels(self) -> list:
        return sorted({t.noise for t in self.tasks})

    def at_noise(self, level: float) -> list:
        return [t for t in self.tasks if t.noise == level]


# -- generators -----------------------------------------------------------------

def _nearest(points: np.ndarray, protos: np.ndarray) -> np.ndarray:
    d = ((points[:, None, :] - protos[None, :, :]) ** 2).sum(-1)
    return d.argmin(axis=1)


def prototype_labels(protos: np.ndarray, rng, flip: float = 0.1) -> np.ndarray:
    """Labels 0, 1 for the first two; later ones copy their nearest predecessor, flipped with prob ``flip``."""
    labels = np.zeros(len(protos), dtype=int)
    labels[1] = 1
    for i in range(2, len(protos)):
        j = _nearest(protos[i:i + 1], protos[:i])[0]
        labels[i] = labels[j] ^ int(rng.random() < flip)
    return labels


def _balanced_partition(protos, labels, rng, per_class: int, tag: str) -> LabeledDataset:
    kept = {0: [], 1: []}
    while min(len(v) for v in kept.values()) < per_class:
        pts = rng.standard_normal((4 * per_class, protos.shape[1]))
        lab = labels[_nearest(pts, protos)]
        for c in (0, 1):
            need = per_class - len(kept[c])
            if need > 0:
                kept[c].extend(pts[lab == c][:need])
    X = np.array(kept[0] + kept[1])
    y = np.array([0] * per_class + [1] * per_class)
    order = rng.permutation(len(y))
    return LabeledDataset(X[order], y[order], tag)


def gen_prototype_task(seed: int, n_protos: int = 20, per_class: int = 50, flip: float = 0.1, dim: int = 2):
    """(train, validation, test) labeled by the nearest of ``n_protos`` random prototypes."""
    rng = generator(seed, "prototype")
    protos = rng.standard_normal((n_protos, dim))
    labels = prototype_labels(protos, rng, flip)
    parts = [_balanced_partition(protos, labels, rng, per_class, f"prototype:{seed}:{name}")
             for name in ("train", "val", "test")]
    return tuple(parts)


def gen_prototype_suite(seed: int, n_datasets: int = 10, noise_levels=(0.0, 0.2, 0.4, 0.6, 0.8, 1.0)) -> TaskSuite:
    tasks = []
    for i in range(n_datasets):
        parts = gen_prototype_task(int(generator(seed, "dataset", i).integers(2 ** 31)))
        tasks.extend(_noisy_variants(parts, i, noise_levels, seed))
    return TaskSuite(tasks, "prototype", seed)


def gen_cluster_task(rng, n: int = 15, sigma: float = 0.1, tag: str = ""):
    """One task: a random 4/4 split of the eight clusters into classes."""
    classes = np.zeros(8, dtype=int)
    classes[rng.permutation(8)[:4]] = 1
    parts = []
    for name in ("train", "val", "test"):
        idx = rng.integers(0, 8, size=n)
        X = CLUSTER_CENTERS[idx] + sigma * rng.standard_normal((n, 2))
        parts.append(LabeledDataset(X, classes[idx], f"{tag}:{name}"))
    return tuple(parts), classes


def gen_cluster_suite(seed: int, M: int = 33, n: int = 15, sigma: float = 0.1, noise_levels=(0.0,)) -> TaskSuite:
    """``M`` cluster tasks, each expanded into one variant per noise level."""
    rng = generator(seed, "clusters")
    tasks = []
    for t in range(M):
        parts, _ = gen_cluster_task(rng, n, sigma, f"clusters:{seed}:{t}")
        tasks.extend(_noisy_variants(parts, t, noise_levels, seed))
    return TaskSuite(tasks, "clusters", seed)


def gen_expression_task(seed: int, n: int = 188, d: int = 200, informative: int = 8, effect: float = 0.6,
                        interaction: float = 0.5) -> LabeledDataset:
    """Wide, weakly separable two-class data shaped like a case/control expression cohort.

    A few columns shift between classes; pairs of them also interact, and the
    remaining columns are correlated noise.
    """
    rng = generator(seed, "expression")
    y = np.array([0] * (n // 2) + [1] * (n - n // 2))
    rng.shuffle(y)
    load = rng.standard_normal((d, 3)) * 0.5
    X = rng.standard_normal((n, d)) + rng.standard_normal((n, 3)) @ load.T
    signs = rng.choice([-1.0, 1.0], size=informative)
    X[:, :informative] += np.outer(y - 0.5, signs) * 2 * effect
    for j in range(0, informative - 1, 2):
        X[:, j + 1] += interaction * (2 * y - 1) * np.tanh(X[:, j])
    perm = rng.permutation(d)
    return LabeledDataset(X[:, perm], y, f"expression:{seed}")


def _noisy_variants(parts, task_id, noise_levels, seed) -> list:
    out = []
    for level in noise_levels:
        noisy = [flip_labels(p, level, generator(seed, "noise", task_id, float(level), k))
                 for k, p in enumerate(parts)]
        out.append(Task(*noisy, noise=float(level), task_id=task_id))
    return out


def flip_labels(S: LabeledDataset, fraction: float, seed) -> LabeledDataset:
    """Complement exactly ``round(fraction * N)`` uniformly chosen labels."""
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else generator(seed, "flip")
    k = int(math.floor(fraction * len(S) + 0.5))
    idx = rng.choice(len(S), size=k, replace=False)
    y = S.y.copy()
    y[idx] = 1 - y[idx]
    return LabeledDataset(S.X.copy(), y, S.provenance)


def bootstrap_aux(S: LabeledDataset, n_aux: int, seed) -> list:
    """``n_aux`` with-replacement resamples of ``S``, each of size ``|S|``."""
    if len(S) == 0:
        raise ValueError("cannot resample an empty dataset")
    rng = seed if isinstance(seed, np.random.Generator) else generator(seed, "bootstrap")
    return [S.subset(rng.integers(0, len(S), size=len(S))) for _ in range(n_aux)]


def split_dataset(S: LabeledDataset, fractions=(0.45, 0.45, 0.1), seed=0):
    """Shuffle and split; sizes are floored and the remainder goes to the first part."""
    rng = generator(seed, "split")
    order = rng.permutation(len(S))
    sizes = [int(math.floor(f * len(S))) for f in fractions]
    sizes[0] += len(S) - sum(sizes)
    cuts = np.cumsum(sizes)[:-1]
    return tuple(S.subset(idx) for idx in np.split(order, cuts))


def t_statistics(S: LabeledDataset) -> np.ndarray:
    """Two-sample (Welch) t statistic of every column between the classes."""
    a, b = S.X[S.y == 1], S.X[S.y == 0]
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each class needs at least two examples")
    with np.errstate(divide="ignore", invalid="ignore"):
        t = stats.ttest_ind(a, b, equal_var=False).statistic
    return np.nan_to_num(np.asarray(t, dtype=float), nan=0.0)


def select_features(train: LabeledDataset, k: int = 5) -> list:
    """Indices of the ``k`` columns with the largest absolute t statistic."""
    if k > train.dim:
        raise ValueError(f"asked for {k} of {train.dim} columns")
    t = np.abs(t_statistics(train))
    return [int(i) for i in np.argsort(-t, kind="stable")[:k]]


# -- CSV ------------------------------------------------------------------------

def save_csv(S: LabeledDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(S.dim)] + ["y"])
        for x, t in zip(S.X, S.y):
            w.writerow([repr(float(v)) for v in x] + [int(t)])


def load_csv(path) -> LabeledDataset:
    path = Path(path)
    raw = path.read_bytes()
    rows = list(csv.reader(raw.decode().splitlines()))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[-1] != "y" or len(header) < 2:
        raise ParseError(f"{path}:1: header must be x1,...,xd,y")
    X, y = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = [float(v) for v in row[:-1]]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError(f"{path}:{lineno}: non-finite input")
        label = row[-1].strip()
        if label not in ("0", "1"):
            raise ParseError(f"{path}:{lineno}: label {label!r} is not 0 or 1")
        X.append(vals)
        y.append(int(label))
    digest = hashlib.sha256(raw).hexdigest()[:16]
    return LabeledDataset(np.array(X).reshape(len(y), len(header) - 1), np.array(y, dtype=int), f"csv:{digest}")


def save_suite(suite: TaskSuite, out_dir) -> Path:
    """Write every partition as CSV plus a manifest listing seeds, noise levels and paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, t in enumerate(suite.tasks):
        files = {}
        for name in ("train", "val", "test"):
            fn = f"task{t.task_id:03d}_noise{int(round(100 * t.noise)):03d}_{name}.csv"
            save_csv(getattr(t, name), out / fn)
            files[name] = fn
        entries.append({"index": i, "task_id": t.task_id, "noise": t.noise, "files": files})
    manifest = {"suite": suite.name, "seed": suite.seed, "noise_levels": suite.noise_levels, "tasks": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_suite(path) -> TaskSuite:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    tasks = []
    for e in manifest["tasks"]:
        parts = [load_csv(path.parent / e["files"][k]) for k in ("train", "val", "test")]
        tasks.append(Task(*parts, noise=float(e["noise"]), task_id=int(e["task_id"])))
    return TaskSuite(tasks, manifest.get("suite", ""), manifest.get("seed"))
