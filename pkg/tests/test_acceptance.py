"""Acceptance criteria, one test per criterion.

Every test records a single ``PASS``/``FAIL`` line that is printed when it
finishes and repeated in the terminal summary under "acceptance criteria".

* Criteria 1-2 need the IBS case-study CSV (``group,dose,response`` with
  group 1 the linear-modelled subgroup and group 2 the Emax-modelled one).
  It is read from ``$CURVE_EQUIV_IBS_CSV`` or ``data/ibs.csv``; without it
  both criteria fail with an explanation.
* Criteria 3-6 and 8 are Monte Carlo runs; their summaries are cached by
  ``mc_support.run_cached`` (precompute with ``python tests/mc_support.py``).
  Criteria 3-4 carry the ``longrun`` marker so that ``-m "not longrun"``
  skips them on machines without a warm cache.
* Criterion 7 reruns the deterministic property tests in a subprocess and
  checks the total runtime.
"""

from __future__ import annotations

import math
import os
import subprocess
import sys
import time
from pathlib import Path

import pytest
from conftest import record_criterion

import mc_support
from curve_equiv.data import load_samples_csv
from curve_equiv.equivalence import band_extrema, bootstrap_distribution, test_l2_asymptotic
from curve_equiv.fitting import fit_ols, pair_fits
from curve_equiv.metrics import dist_l2sq, dist_sup
from curve_equiv.models import EMAX, LINEAR

ROOT = Path(__file__).resolve().parents[1]
IBS_SEED = 20240601


def _ibs_path() -> Path | None:
    path = Path(os.environ.get("CURVE_EQUIV_IBS_CSV", ROOT / "data" / "ibs.csv"))
    return path if path.is_file() else None


def _missing_ibs(number: int):
    msg = ("IBS case-study CSV not found (set CURVE_EQUIV_IBS_CSV or add data/ibs.csv); "
           "the goldens cannot be checked without the data")
    record_criterion(number, False, msg)
    pytest.fail(msg)


class Checks:
    """Collects named comparisons so that one line reports all of them."""

    def __init__(self):
        self.items: list[tuple[str, bool]] = []

    def near(self, name, got, want, tol):
        ok = got is not None and math.isfinite(got) and abs(got - want) <= tol
        shown = "n/a" if got is None else f"{got:.4f}"
        self.items.append((f"{name}={shown} (want {want}±{tol})", ok))

    def true(self, name, ok):
        self.items.append((name, bool(ok)))

    @property
    def passed(self) -> bool:
        return all(ok for _, ok in self.items)

    def report(self, number: int, prefix: str = "") -> None:
        failed = [n for n, ok in self.items if not ok]
        if failed:
            detail = prefix + "failed: " + "; ".join(failed)
        elif len(self.items) <= 12:
            detail = prefix + "; ".join(n for n, _ in self.items)
        else:
            detail = prefix + f"all {len(self.items)} checks hold"
        record_criterion(number, self.passed, detail)
        assert self.passed, detail


# ---------------------------------------------------------------------------
# 1-2: case study
# ---------------------------------------------------------------------------

def test_criterion_1_case_study_goldens():
    path = _ibs_path()
    if path is None:
        _missing_ibs(1)
    t0 = time.perf_counter()
    s1, s2 = load_samples_csv(path)
    f1, f2 = fit_ols(LINEAR, s1), fit_ols(EMAX, s2)
    pf = pair_fits(f1, f2)
    sup = dist_sup(pf)
    d2 = dist_l2sq(pf)
    asym = {a: test_l2_asymptotic(pf, 0.05, a) for a in (0.05, 0.1)}
    bands = {a: band_extrema(pf, a) for a in (0.05, 0.1)}
    elapsed = time.perf_counter() - t0

    c = Checks()
    for name, got, want in zip(("b11", "b12"), f1.beta_hat, (0.398, 0.043)):
        c.near(name, float(got), want, 0.001)
    for name, got, want in zip(("b21", "b22", "b23"), f2.beta_hat, (0.220, 0.517, 1.396)):
        c.near(name, float(got), want, 0.001)
    c.near("d_sup", sup.value, 0.1784, 0.0005)
    c.true("d_sup attained at x=0", any(abs(x) <= 1e-6 for x in sup.extremal_points))
    c.near("d2", d2, 0.0126, 0.0005)
    c.near("sigma2_d2/n", asym[0.05].diagnostics["sigma2_d2_over_n"], 0.0010, 0.0001)
    c.near("crit(0.05)", asym[0.05].critical_value, -0.0022, 0.0005)
    c.near("crit(0.1)", asym[0.1].critical_value, 0.0093, 0.0005)
    c.near("p", asym[0.05].p_value, 0.1193, 0.002)
    for a, (U, L) in ((0.05, (0.282, -0.450)), (0.1, (0.227, -0.390))):
        c.near(f"U({a})", bands[a][0], U, 0.003)
        c.near(f"L({a})", bands[a][1], L, 0.003)
    c.true(f"runtime {elapsed:.2f}s < 5s", elapsed < 5.0)
    c.report(1)


def test_criterion_2_case_study_bootstrap():
    path = _ibs_path()
    if path is None:
        _missing_ibs(2)
    s1, s2 = load_samples_csv(path)
    t0 = time.perf_counter()
    fits = (fit_ols(LINEAR, s1), fit_ols(EMAX, s2))
    table = {0.3: (0.1293, 0.1628), 0.35: (0.1578, 0.1972), 0.4: (0.1867, 0.2322)}
    c = Checks()
    sup = {}
    for eps, (q05, q10) in table.items():
        sup[eps] = bootstrap_distribution(LINEAR, EMAX, s1, s2, eps, 5000, "sup", IBS_SEED,
                                          fits=fits)
        c.near(f"q05(eps={eps})", sup[eps].outcome(0.05).critical_value, q05, 0.01)
        c.near(f"q10(eps={eps})", sup[eps].outcome(0.1).critical_value, q10, 0.01)
    c.near("p_sup(0.35)", sup[0.35].p_value, 0.078, 0.012)
    l2 = bootstrap_distribution(LINEAR, EMAX, s1, s2, 0.05, 5000, "l2sq", IBS_SEED, fits=fits)
    c.near("p_l2(0.05)", l2.p_value, 0.059, 0.012)
    c.near("q05_l2", l2.outcome(0.05).critical_value, 0.0108, 0.005)
    c.near("q10_l2", l2.outcome(0.1).critical_value, 0.0169, 0.005)
    d_hat = sup[0.35].d_hat
    plateau = {bootstrap_distribution(LINEAR, EMAX, s1, s2, e, 5000, "sup", IBS_SEED,
                                      fits=fits).p_value
               for e in (0.25 * d_hat, 0.5 * d_hat, d_hat)}
    c.true(f"p-value plateau for eps <= d_hat ({sorted(plateau)})", len(plateau) == 1)
    elapsed = time.perf_counter() - t0
    c.true(f"runtime {elapsed:.0f}s < 300s", elapsed < 300.0)
    c.report(2)


# ---------------------------------------------------------------------------
# 3-6, 8: Monte Carlo rates
# ---------------------------------------------------------------------------

def _rate_check(c: Checks, summary, method, alpha, want, tol, label=""):
    got = mc_support.cell(summary, method, alpha)
    c.near(f"{label}{method}@{alpha}", got["rate"], want, tol)
    return got


@pytest.mark.longrun
def test_criterion_3_table1_boundary_level():
    s = mc_support.run_cached(mc_support.criterion3())
    c = Checks()
    _rate_check(c, s, "BOOT_L2", 0.05, 0.057, 0.02)
    c.true("no failed replicates", not s["errors"])
    c.report(3, f"nsim=1000, {s['wall_time']:.0f}s; ")


@pytest.mark.longrun
def test_criterion_4_table3_power():
    s = mc_support.run_cached(mc_support.criterion4())
    c = Checks()
    _rate_check(c, s, "BOOT_L2", 0.05, 0.984, 0.02)
    c.report(4, f"nsim=1000, {s['wall_time']:.0f}s; ")


def test_criterion_5_sup_boundary_unique_extremum():
    s = mc_support.run_cached(mc_support.criterion5())
    c = Checks()
    _rate_check(c, s, "BOOT_SUP", 0.05, 0.051, 0.025)
    _rate_check(c, s, "BAND_IU", 0.05, 0.013, 0.015)
    c.report(5, f"nsim=1000, {s['wall_time']:.0f}s; ")


def test_criterion_6_conservativeness_ordering():
    c = Checks()
    configs = mc_support.criterion6()
    for cfg in configs:
        s = mc_support.run_cached(cfg)
        for alpha in (0.05, 0.1):
            boot = mc_support.cell(s, "BOOT_SUP", alpha)
            band = mc_support.cell(s, "BAND_IU", alpha)
            se = math.hypot(boot["se"], band["se"])
            c.true(f"{cfg.scenario_id}@{alpha}: BAND_IU {band['rate']:.3f} > "
                   f"BOOT_SUP {boot['rate']:.3f} + 2*{se:.3f}",
                   band["rate"] <= boot["rate"] + 2 * se)
            if cfg.scenario_id.startswith("table9_row_n50_"):
                c.true(f"{cfg.scenario_id}@{alpha}: BOOT_SUP {boot['rate']:.3f} > alpha - 0.02",
                       boot["rate"] <= alpha - 0.02)
    c.report(6, f"{len(configs)} boundary scenarios; ")


def test_criterion_8_constant_boundary_level():
    s = mc_support.run_cached(mc_support.criterion8())
    c = Checks()
    _rate_check(c, s, "BOOT_L2", 0.05, 0.05, 0.03)
    _rate_check(c, s, "L2_ASYMPTOTIC", 0.05, 0.05, 0.03)
    c.report(8, "n=400, nsim=500; ")


# ---------------------------------------------------------------------------
# 7: property suites
# ---------------------------------------------------------------------------

PROPERTY_TESTS = (
    "test_models.py::test_gradient_matches_finite_differences_1000_points",
    "test_metrics.py::test_l2_matches_riemann_oracle_on_all_scenarios",
    "test_constrain.py::test_feasibility_and_dominance_on_random_instances",
    "test_constrain.py::test_constant_lagrange_closed_form",
    "test_equivalence.py::test_bootstrap_bit_identical_across_workers",
    "test_metrics.py::test_band_variance_identity",
    "test_metrics.py::test_constant_kernel_closed_forms",
    "test_metrics.py::test_gram_matrix_is_psd",
)


def test_criterion_7_property_suites():
    here = Path(__file__).parent
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
         *(str(here / t) for t in PROPERTY_TESTS)],
        cwd=ROOT, capture_output=True, text=True,
    )
    elapsed = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    c = Checks()
    c.true(f"property tests ({tail})", proc.returncode == 0)
    c.true(f"runtime {elapsed:.0f}s < 120s", elapsed < 120.0)
    c.report(7)


def test_property_list_is_collectable():
    # guards the node ids above against renames
    for node in PROPERTY_TESTS:
        module, name = node.split("::")
        assert f"def {name}(" in (Path(__file__).parent / module).read_text()
