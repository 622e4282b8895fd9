"""Shared Monte Carlo scenarios and a result cache for the acceptance suite.

Simulation results are a deterministic function of the scenario config and
of the numerical code, so a finished run is stored under a key made of both
(the config JSON and a hash of the package's numerical modules).  Any edit to
those modules invalidates every entry.  Set ``CURVE_EQUIV_MC_CACHE=off`` to
always recompute, or to a directory path to relocate the cache.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import curve_equiv
from curve_equiv.mcsim import ScenarioConfig, constant_scenarios, paper_scenarios, preset, run_scenario

ROOT = Path(__file__).resolve().parents[1]
NUMERIC_MODULES = ("constrain", "data", "equivalence", "fitting", "mcsim", "metrics", "models",
                   "solver", "streams")


def workers() -> int:
    return max(1, int(os.environ.get("CURVE_EQUIV_THREADS", os.cpu_count() or 1)))


def code_fingerprint() -> str:
    pkg = Path(curve_equiv.__file__).parent
    h = hashlib.sha256()
    for name in NUMERIC_MODULES:
        h.update((pkg / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


def _cache_dir() -> Path | None:
    raw = os.environ.get("CURVE_EQUIV_MC_CACHE", str(ROOT / ".mc_cache"))
    if raw.lower() in ("off", "0", "no", ""):
        return None
    return Path(raw)


def summarize(res) -> dict:
    return {
        "scenario_id": res.config.scenario_id,
        "cells": [
            {"method": c.method.value, "alpha": c.alpha, "rejections": c.rejections,
             "valid": c.valid, "dropped": c.dropped}
            for c in res.cells
        ],
        "true_d2": res.true_d2,
        "true_dsup": res.true_dsup,
        "wall_time": res.wall_time,
        "errors": res.errors,
    }


def run_cached(cfg: ScenarioConfig) -> dict:
    """Summary of ``run_scenario(cfg)``; reused when config and code are unchanged."""
    cache = _cache_dir()
    blob = json.dumps(cfg.to_dict(), sort_keys=True)
    key = hashlib.sha256((code_fingerprint() + blob).encode()).hexdigest()[:24]
    path = None if cache is None else cache / f"{cfg.scenario_id}-{key}.json"
    if path is not None and path.is_file():
        return json.loads(path.read_text())
    out = summarize(run_scenario(cfg, workers()))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(out, indent=1))
        tmp.replace(path)
    return out


def cell(summary: dict, method: str, alpha: float) -> dict:
    for c in summary["cells"]:
        if c["method"] == method and abs(c["alpha"] - alpha) < 1e-12:
            rate = c["rejections"] / c["valid"] if c["valid"] else float("nan")
            se = (rate * (1 - rate) / c["valid"]) ** 0.5 if c["valid"] else float("nan")
            return {**c, "rate": rate, "se": se}
    raise KeyError((method, alpha))


# ---------------------------------------------------------------------------
# Scenario sets used by the acceptance criteria
# ---------------------------------------------------------------------------

def criterion3() -> ScenarioConfig:
    return preset("table1_row_n20_delta0.5_s0.25_0.25", nsim=1000, B=300)[0]


def criterion4() -> ScenarioConfig:
    return preset("table3_row_n50_delta0_s0.25_0.25", nsim=1000, B=300)[0]


def criterion5() -> ScenarioConfig:
    return preset("table5_row_n50_delta0.75_s0.25_0.25", nsim=1000, B=300)[0]


# boundary rows (d = eps) of the ordering tables 5, 7 and 9; table 7 only has
# rows inside the alternative, so it contributes none
BOUNDARY_ROWS = {"table5": "delta0.75", "table9": "d0.5"}


def criterion6() -> list[ScenarioConfig]:
    tables = paper_scenarios(nsim=500, B=300)
    out = []
    for table, label in BOUNDARY_ROWS.items():
        out.extend(c for c in tables[table] if c.scenario_id.split("_")[-3] == label)
    return out


def criterion8() -> ScenarioConfig:
    return constant_scenarios(nsim=500, B=300, n=200)["constant_boundary"]


def all_long() -> list[ScenarioConfig]:
    return [criterion8(), criterion3(), criterion4(), criterion5(), *criterion6()]


if __name__ == "__main__":  # precompute: python tests/mc_support.py
    import sys
    import time

    for cfg in all_long():
        t = time.time()
        s = run_cached(cfg)
        rates = ", ".join(f"{c['method']}@{c['alpha']}={c['rejections'] / max(c['valid'], 1):.3f}"
                          for c in s["cells"])
        print(f"{cfg.scenario_id} [{time.time() - t:.0f}s] {rates} {s['errors'] or ''}", flush=True)
    sys.exit(0)
