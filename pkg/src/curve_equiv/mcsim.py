"""Monte Carlo harness for rejection rates of the equivalence tests.

A :class:`ScenarioConfig` fixes the generating curves, design, error
variances, hypothesis and test methods.  Replicate ``i`` draws its data from
the stream ``derive_seed(master_seed, scenario_id, i)`` (group 1 before
group 2) and every bootstrap inside it from a stream derived from that, so
rates are identical for any worker count.
"""

from __future__ import annotations

import csv
import json
import math
import multiprocessing
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import simulate_sample
from .equivalence import (
    Method,
    bootstrap_distribution,
    check_alpha,
    test_band_iu,
    test_l2_asymptotic,
    test_sup_asymptotic,
)
from .errors import NumericalError, UsageError
from .fitting import fit_ols, pair_fits
from .metrics import Distance, gauss_legendre, l2sq_params, sup_params
from .models import get_model
from .streams import derive_seed, generator

DEFAULT_NSIM = 500
DEFAULT_B = 300
DEFAULT_SEED = 20240101

L2_METHODS = (Method.L2_ASYMPTOTIC, Method.BOOT_L2)
SUP_METHODS = (Method.BOOT_SUP, Method.SUP_ASYMPTOTIC, Method.BAND_IU)

TABLE_COLUMNS = ("scenario_id", "method", "alpha", "n1", "n2", "sigma1_sq", "sigma2_sq", "delta",
                 "true_d2", "true_dsup", "rate", "se", "nsim", "B", "seed")


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario.  ``doses`` and ``counts`` hold one sequence per group."""

    scenario_id: str
    model1: str
    model2: str
    true_beta1: tuple[float, ...]
    true_beta2: tuple[float, ...]
    doses: tuple[tuple[float, ...], tuple[float, ...]]
    counts: tuple[tuple[int, ...], tuple[int, ...]]
    sigma2: tuple[float, float]
    region: tuple[float, float]
    distance: Distance
    eps: float
    alphas: tuple[float, ...] = (0.05, 0.1)
    methods: tuple[Method, ...] = (Method.BOOT_L2,)
    nsim: int = DEFAULT_NSIM
    B: int = DEFAULT_B
    master_seed: int = DEFAULT_SEED
    delta: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "distance", Distance.parse(self.distance))
        try:
            methods = tuple(Method(m) for m in self.methods)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        object.__setattr__(self, "methods", methods)
        for name in ("true_beta1", "true_beta2", "alphas", "sigma2", "region"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        object.__setattr__(self, "doses", tuple(tuple(float(v) for v in d) for d in self.doses))
        object.__setattr__(self, "counts", tuple(tuple(int(v) for v in c) for c in self.counts))
        if self.nsim < 1:
            raise UsageError("nsim must be at least 1")
        if not self.alphas:
            raise UsageError("at least one alpha is required")
        for a in self.alphas:
            check_alpha(a)
        if not self.eps > 0:
            raise UsageError("eps must be positive")
        if len(self.doses) != 2 or len(self.counts) != 2 or len(self.sigma2) != 2:
            raise UsageError("doses, counts and sigma2 need one entry per group")
        allowed = L2_METHODS if self.distance is Distance.L2SQ else SUP_METHODS
        bad = [m.value for m in methods if m not in allowed]
        if bad or not methods:
            raise UsageError(f"methods {bad or '[]'} do not match distance {self.distance.value}")
        get_model(self.model1)
        get_model(self.model2)

    @property
    def n1(self) -> int:
        return sum(self.counts[0])

    @property
    def n2(self) -> int:
        return sum(self.counts[1])

    def replace(self, **changes) -> "ScenarioConfig":
        data = asdict(self)
        data.update(changes)
        return ScenarioConfig(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distance"] = self.distance.value
        d["methods"] = [m.value for m in self.methods]
        for k, v in list(d.items()):
            if isinstance(v, tuple):
                d[k] = json.loads(json.dumps(v))
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown scenario fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise UsageError(f"invalid scenario config: {exc}") from None


@dataclass(frozen=True)
class CellResult:
    method: Method
    alpha: float
    rejections: int
    valid: int
    dropped: int

    @property
    def rate(self) -> float:
        return self.rejections / self.valid if self.valid else float("nan")

    @property
    def se(self) -> float:
        r = self.rate
        return math.sqrt(r * (1.0 - r) / self.valid) if self.valid else float("nan")


@dataclass(frozen=True)
class ScenarioResult:
    config: ScenarioConfig
    cells: tuple[CellResult, ...]
    true_d2: float
    true_dsup: float
    wall_time: float
    bootstrap_dropped: int = 0
    errors: dict = field(default_factory=dict)

    def cell(self, method: Method | str, alpha: float) -> CellResult:
        method = Method(method)
        for c in self.cells:
            if c.method is method and abs(c.alpha - alpha) < 1e-12:
                return c
        raise KeyError((method, alpha))


def true_distances(cfg: ScenarioConfig) -> tuple[float, float]:
    s1, s2 = get_model(cfg.model1), get_model(cfg.model2)
    b1, b2 = np.array(cfg.true_beta1), np.array(cfg.true_beta2)
    d2 = float(l2sq_params(s1, b1, s2, b2, gauss_legendre(cfg.region)))
    dsup = sup_params(s1, b1, s2, b2, cfg.region).value
    return d2, dsup


def replicate_seed(cfg: ScenarioConfig, i: int) -> int:
    return derive_seed(cfg.master_seed, cfg.scenario_id, i)


def run_replicate(cfg: ScenarioConfig, i: int) -> dict:
    with warnings.catch_warnings():
        # small-sample fits and B below the recommendation warn on every replicate
        warnings.simplefilter("ignore", RuntimeWarning)
        return _replicate(cfg, i)


def _replicate(cfg: ScenarioConfig, i: int) -> dict:
    """Decisions of every configured method for replicate ``i``.

    Returns ``{"decisions": {(method, alpha): bool | None}, "boot_dropped": int,
    "errors": [names]}``; ``None`` marks a method that failed numerically.
    """
    spec1, spec2 = get_model(cfg.model1), get_model(cfg.model2)
    seed = replicate_seed(cfg, i)
    rng = generator(seed)
    s1 = simulate_sample(spec1, cfg.true_beta1, cfg.doses[0], cfg.counts[0], cfg.sigma2[0], rng,
                         cfg.region)
    s2 = simulate_sample(spec2, cfg.true_beta2, cfg.doses[1], cfg.counts[1], cfg.sigma2[1], rng,
                         cfg.region)
    decisions: dict = {}
    errors: list[str] = []
    boot_dropped = 0

    def fail(method, exc):
        errors.append(f"{method.value}:{type(exc).__name__}")
        for a in cfg.alphas:
            decisions[(method, a)] = None

    try:
        fits = (fit_ols(spec1, s1, starts=[cfg.true_beta1], check_information=False),
                fit_ols(spec2, s2, starts=[cfg.true_beta2], check_information=False))
    except NumericalError as exc:
        for m in cfg.methods:
            fail(m, exc)
        return {"decisions": decisions, "boot_dropped": 0, "errors": errors}
    pf = pair_fits(fits[0], fits[1], cfg.region)

    for m in cfg.methods:
        try:
            if m in (Method.BOOT_L2, Method.BOOT_SUP):
                dist = bootstrap_distribution(
                    spec1, spec2, s1, s2, cfg.eps, cfg.B, cfg.distance,
                    derive_seed(seed, "bootstrap"), cfg.region, fits=fits,
                )
                boot_dropped += dist.dropped
                for a in cfg.alphas:
                    decisions[(m, a)] = dist.outcome(a).reject
            elif m is Method.L2_ASYMPTOTIC:
                for a in cfg.alphas:
                    decisions[(m, a)] = test_l2_asymptotic(pf, cfg.eps, a).reject
            elif m is Method.SUP_ASYMPTOTIC:
                for a in cfg.alphas:
                    decisions[(m, a)] = test_sup_asymptotic(pf, cfg.eps, a).reject
            else:
                for a in cfg.alphas:
                    decisions[(m, a)] = test_band_iu(pf, cfg.eps, a).reject
        except NumericalError as exc:
            fail(m, exc)
    return {"decisions": decisions, "boot_dropped": boot_dropped, "errors": errors}


def _run_chunk(args):
    cfg, indices = args
    return [run_replicate(cfg, i) for i in indices]


def run_scenario(cfg: ScenarioConfig, workers: int = 1) -> ScenarioResult:
    """Simulate ``cfg.nsim`` replicates and aggregate rejection rates."""
    t0 = time.perf_counter()
    idx = list(range(cfg.nsim))
    if workers <= 1:
        reps = [run_replicate(cfg, i) for i in idx]
    else:
        chunks = [(cfg, idx[k::workers]) for k in range(workers)]
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            parts = list(pool.map(_run_chunk, chunks))
        reps = [None] * cfg.nsim
        for (_, ids), part in zip(chunks, parts):
            for i, r in zip(ids, part):
                reps[i] = r

    cells = []
    for m in cfg.methods:
        for a in cfg.alphas:
            vals = [r["decisions"][(m, a)] for r in reps]
            ok = [v for v in vals if v is not None]
            cells.append(CellResult(m, a, int(sum(ok)), len(ok), len(vals) - len(ok)))
    errors: dict[str, int] = {}
    for r in reps:
        for e in r["errors"]:
            errors[e] = errors.get(e, 0) + 1
    d2, dsup = true_distances(cfg)
    return ScenarioResult(cfg, tuple(cells), d2, dsup, time.perf_counter() - t0,
                          sum(r["boot_dropped"] for r in reps), errors)


# ---------------------------------------------------------------------------
# Paper scenarios
# ---------------------------------------------------------------------------

DOSES = (0.0, 1.0, 2.0, 3.0, 4.0)
REGION = (0.0, 4.0)
SAMPLE_SIZES = ((10, 10), (10, 20), (20, 20), (50, 50))
VARIANCES = ((0.25, 0.25), (0.5, 0.5), (0.25, 0.5))


def _shifted_emax(delta):
    return "emax", "emax", (delta, 5.0, 1.0), (0.0, 5.0, 1.0)


def _emax_exponential(delta):
    return "emax", "exponential", (1.0, 2.0, 1.0), (delta, 2.2, 8.0)


def _emax_pair(delta):
    return "emax", "emax", (delta, 6.0, 2.0), (0.0, 5.0, 1.0)


def _quadratic_linear(delta):
    return "quadratic", "linear", (delta, -3.0 * delta, 3.0 * delta), (delta, delta)


# table id -> (curves, distance, eps, methods, row label, [(label value, delta)])
_TABLES = {
    "table1": (_shifted_emax, "l2sq", 1.0, ("BOOT_L2",), "delta", [(1, 1), (0.75, 0.75), (0.5, 0.5)]),
    "table2": (_shifted_emax, "l2sq", 1.0, ("L2_ASYMPTOTIC",), "delta",
               [(1, 1), (0.75, 0.75), (0.5, 0.5)]),
    "table3": (_shifted_emax, "l2sq", 1.0, ("BOOT_L2",), "delta", [(0.25, 0.25), (0.1, 0.1), (0, 0)]),
    "table4": (_shifted_emax, "l2sq", 1.0, ("L2_ASYMPTOTIC",), "delta",
               [(0.25, 0.25), (0.1, 0.1), (0, 0)]),
    "table5": (_emax_exponential, "sup", 1.0, ("BOOT_SUP", "BAND_IU"), "delta",
               [(0.25, 0.25), (0.5, 0.5), (0.75, 0.75)]),
    "table6": (_emax_exponential, "sup", 1.0, ("SUP_ASYMPTOTIC",), "delta",
               [(0.25, 0.25), (0.5, 0.5), (0.75, 0.75)]),
    "table7": (_emax_exponential, "sup", 1.0, ("BOOT_SUP", "BAND_IU"), "delta", [(1, 1), (1.5, 1.5)]),
    "table8": (_emax_exponential, "sup", 1.0, ("SUP_ASYMPTOTIC",), "delta", [(1, 1), (1.5, 1.5)]),
    "table9": (_shifted_emax, "sup", 0.5, ("BOOT_SUP", "BAND_IU"), "d", [(1, 1), (0.75, 0.75), (0.5, 0.5)]),
    "table10": (_shifted_emax, "sup", 0.5, ("BOOT_SUP", "BAND_IU"), "d",
                [(0.25, 0.25), (0.1, 0.1), (0, 0)]),
    "table11": (_emax_pair, "sup", 1.0, ("BOOT_SUP", "BAND_IU"), "d", [(2, 2), (1.5, 1.5), (1, 1)]),
    "table12": (_emax_pair, "sup", 1.0, ("BOOT_SUP", "BAND_IU"), "d", [(0.75, 0.75), (0.5, 0.5), (0, 0)]),
    "table13": (_quadratic_linear, "sup", 1.0, ("BOOT_SUP", "BAND_IU"), "d",
                [(2, 1), (1.5, 0.75), (1, 0.5)]),
    "table14": (_quadratic_linear, "sup", 1.0, ("BOOT_SUP", "BAND_IU"), "d", [(0.4, 0.2), (0.2, 0.1)]),
}


def _num(v: float) -> str:
    return f"{v:g}"


def _n_label(n1: int, n2: int) -> str:
    return f"n{n1}" if n1 == n2 else f"n{n1}_{n2}"


def paper_scenarios(nsim: int = DEFAULT_NSIM, B: int = DEFAULT_B,
                    master_seed: int = DEFAULT_SEED) -> dict[str, list[ScenarioConfig]]:
    """Every simulation scenario of the reference tables, keyed by table id.

    Scenario ids read ``<table>_row_<n>_<label><value>_s<sigma1>_<sigma2>``;
    a row id (without the variance suffix) groups the three variance pairs.
    """
    out: dict[str, list[ScenarioConfig]] = {}
    for table, (curves, distance, eps, methods, label, values) in _TABLES.items():
        configs = []
        for n1, n2 in SAMPLE_SIZES:
            for value, delta in values:
                m1, m2, b1, b2 = curves(float(delta))
                row = f"{table}_row_{_n_label(n1, n2)}_{label}{_num(value)}"
                for v1, v2 in VARIANCES:
                    configs.append(ScenarioConfig(
                        scenario_id=f"{row}_s{_num(v1)}_{_num(v2)}",
                        model1=m1, model2=m2, true_beta1=b1, true_beta2=b2,
                        doses=(DOSES, DOSES),
                        counts=((n1 // len(DOSES),) * len(DOSES), (n2 // len(DOSES),) * len(DOSES)),
                        sigma2=(v1, v2), region=REGION, distance=distance, eps=eps,
                        alphas=(0.05, 0.1), methods=methods, nsim=nsim, B=B,
                        master_seed=master_seed, delta=float(delta),
                    ))
        out[table] = configs
    return out


def constant_scenarios(nsim: int = DEFAULT_NSIM, B: int = DEFAULT_B,
                       master_seed: int = DEFAULT_SEED, n: int = 200) -> dict[str, ScenarioConfig]:
    """CONSTANT-vs-CONSTANT level and power checks with closed-form distances.

    One dose at x=0.5 on [0, 1], unit error variances, ``n`` observations per
    group and eps2 = 1.  ``constant_boundary`` has ``d2 = (b - c)^2 = eps2``
    exactly; ``constant_interior`` has identical curves (``d2 = 0``).
    """
    out = {}
    for name, shift in (("constant_boundary", 1.0), ("constant_interior", 0.0)):
        out[name] = ScenarioConfig(
            scenario_id=f"{name}_n{n}", model1="constant", model2="constant",
            true_beta1=(shift,), true_beta2=(0.0,), doses=((0.5,), (0.5,)), counts=((n,), (n,)),
            sigma2=(1.0, 1.0), region=(0.0, 1.0), distance="l2sq", eps=1.0, alphas=(0.05,),
            methods=("BOOT_L2", "L2_ASYMPTOTIC"), nsim=nsim, B=B, master_seed=master_seed,
            delta=shift,
        )
    return out


def row_id(cfg: ScenarioConfig) -> str:
    return cfg.scenario_id.rsplit("_s", 1)[0]


def preset(name: str, nsim: int = DEFAULT_NSIM, B: int = DEFAULT_B,
           master_seed: int = DEFAULT_SEED) -> list[ScenarioConfig]:
    """Scenarios addressed by a table id, a row id or a full scenario id."""
    extra = constant_scenarios(nsim, B, master_seed)
    if name in extra:
        return [extra[name]]
    tables = paper_scenarios(nsim, B, master_seed)
    if name in tables:
        return tables[name]
    table = name.split("_", 1)[0]
    configs = tables.get(table, [])
    hits = [c for c in configs if c.scenario_id == name] or [c for c in configs if row_id(c) == name]
    if not hits:
        known = ", ".join(list(tables) + list(extra))
        raise UsageError(f"unknown preset {name!r} (known: {known})")
    return hits


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def table_rows(results) -> list[dict]:
    rows = []
    for res in results:
        cfg = res.config
        for c in res.cells:
            rows.append({
                "scenario_id": cfg.scenario_id,
                "method": c.method.value,
                "alpha": c.alpha,
                "n1": cfg.n1,
                "n2": cfg.n2,
                "sigma1_sq": cfg.sigma2[0],
                "sigma2_sq": cfg.sigma2[1],
                "delta": "" if cfg.delta is None else cfg.delta,
                "true_d2": round(res.true_d2, 10),
                "true_dsup": round(res.true_dsup, 10),
                "rate": c.rate,
                "se": c.se,
                "nsim": c.valid,
                "B": cfg.B if c.method in (Method.BOOT_L2, Method.BOOT_SUP) else 0,
                "seed": cfg.master_seed,
            })
    return rows


def emit_table(results, path) -> Path:
    """Write one CSV row per (scenario, method, alpha) cell."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in table_rows(results):
            w.writerow(row)
    return path
