"""Bound configuration and decomposable bound reports."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace


class ConfigError(ValueError):
    """Invalid bound or experiment configuration."""


@dataclass(frozen=True)
class BoundConfig:
    lam: float = 10.0
    delta: float = 0.05
    n: int | None = None
    tau: float = 0.0
    beta: float = 1.0
    n_aux: int = 20
    m_tasks: int | None = None
    meta_constants: str = "appendix"
    task_prior: str = "hyper_posterior"

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.lam <= 0:
            raise ConfigError("lambda must be positive")
        if not 0 <= self.tau <= 1:
            raise ConfigError("tau must lie in [0, 1]")
        if self.beta < 0:
            raise ConfigError("beta must be nonnegative")
        if self.meta_constants not in ("appendix", "main"):
            raise ConfigError("meta_constants is 'appendix' or 'main'")
        if self.task_prior not in ("hyper_posterior", "hyper_prior"):
            raise ConfigError("task_prior is 'hyper_posterior' or 'hyper_prior'")

    def with_(self, **kw) -> "BoundConfig":
        return replace(self, **kw)

    @property
    def confidence(self) -> float:
        return math.log(1.0 / self.delta)

    def lambda_term(self, n: int | None = None) -> float:
        n = self.n if n is None else n
        if not n or n < 1:
            raise ConfigError("sample count N must be >= 1")
        return self.lam ** 2 / n

    def meta_abcd(self, n_task: int, m: int | None = None) -> tuple[float, float, float, float]:
        """Constants (a, b, c, d) of the two-level bound for a task of size ``n_task``."""
        m = self.m_tasks if m is None else m
        if m is None or m < 2:
            raise ConfigError("meta-learning constants need at least two tasks")
        if n_task < 2:
            raise ConfigError("each task needs at least two examples")
        delta = self.delta
        if self.meta_constants == "main":
            a = math.log(2 * m * n_task / delta)
            c = math.log(2 * m / delta)
        else:
            a = math.log(2 * m * n_task / (delta / (2 * m)))
            c = math.log(m / (delta / 2))
        return a, 2.0 * (n_task - 1), c, 2.0 * (m - 1)

    def single_ab(self, n: int) -> tuple[float, float]:
        if n < 2:
            raise ConfigError("need at least two examples")
        return math.log(2 * n / self.delta), 2.0 * (n - 1)

    def to_json(self) -> dict:
        return asdict(self)


def _eps(t: dict) -> float:
    tau = t["tau"]
    if tau >= 1:
        return 1.0
    return tau + (t["risk_tau"] + t["eta"] + t["p1"]) * (1 - tau)


COMBINE = {
    "phi1": lambda t, c: t["empirical_risk"] + (t["kl"] + t["confidence"] + t["lambda_term"]) / c["lam"],
    "phi1a": lambda t, c: t["nll_surrogate"] + t["kl_r1"]
    + (t["entropy_bound"] + t["cross_entropy"] + t["confidence"] + t["lambda_term"]) / c["lam"],
    "phi1b": lambda t, c: t["empirical_risk"] + t["complexity"],
    "phi2": lambda t, c: t["task_risk"] + t["task_complexity"] + t["hyper_complexity"],
    "phi2b": lambda t, c: t["task_elbo"] + t["task_complexity"] + t["hyper_complexity"],
    "2o": lambda t, c: t["empirical_risk"] + _eps(t),
    "2o-ml": lambda t, c: t["empirical_risk"] + _eps(t),
    "2o-ml-transfer": lambda t, c: t["task_bound_mean"] + t["eta_g2"],
    "gaussian-phi2": lambda t, c: t["task_risk"] + t["task_complexity"] + t["hyper_complexity"],
}


@dataclass
class BoundReport:
    """A bound value with every additive component and the settings behind it."""

    kind: str
    total: float
    terms: dict
    config: dict
    seeds: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def build(cls, kind: str, terms: dict, cfg: BoundConfig | dict, seeds=(), **diagnostics) -> "BoundReport":
        conf = cfg.to_json() if isinstance(cfg, BoundConfig) else dict(cfg)
        terms = {k: float(v) for k, v in terms.items()}
        total = float(COMBINE[kind](terms, conf))
        return cls(kind, total, terms, conf, [int(s) for s in seeds if s is not None], diagnostics)

    def recompute(self) -> float:
        return float(COMBINE[self.kind](self.terms, self.config))

    @property
    def vacuous(self) -> bool:
        return not math.isfinite(self.total) or self.total >= 1.0

    def to_json(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v

        return clean({"kind": self.kind, "total": self.total, "terms": self.terms, "config": self.config,
                      "seeds": self.seeds, "diagnostics": self.diagnostics})

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def from_json(cls, obj: dict) -> "BoundReport":
        def num(v):
            return float(v) if isinstance(v, str) and v in ("inf", "-inf", "nan") else v

        terms = {k: num(v) for k, v in obj["terms"].items()}
        return cls(obj["kind"], num(obj["total"]), terms, obj["config"], obj.get("seeds", []),
                   obj.get("diagnostics", {}))
