"""Command-line interface: ``curve-equiv {fit,test,simulate,bands}``.

Exit codes: 0 success (including a test that does not reject), 2 usage or
validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .data import load_samples_csv
from .equivalence import (
    Method,
    bootstrap_distribution,
    check_alpha,
    check_eps,
    test_band_iu,
    test_l2_asymptotic,
    test_sup_asymptotic,
)
from .errors import CurveEquivError, NonUniqueExtremum, NumericalError, UsageError
from .fitting import fit_ols, pair_fits
from .mcsim import ScenarioConfig, emit_table, preset, run_scenario, table_rows, TABLE_COLUMNS
from .metrics import GRID_N, Distance, band_halfwidth, diff_profile, dist_l2sq, dist_sup
from .models import get_model

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

THREADS_ENV = "CURVE_EQUIV_THREADS"
DEFAULT_BAND_POINTS = 201

METHOD_FLAGS = {
    "l2-asymptotic": Method.L2_ASYMPTOTIC,
    "boot-l2": Method.BOOT_L2,
    "boot-sup": Method.BOOT_SUP,
    "sup-asymptotic": Method.SUP_ASYMPTOTIC,
    "band-iu": Method.BAND_IU,
}


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on its own errors, which matches our convention."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _region(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"region must be 'lo,hi', got {text!r}") from None
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise argparse.ArgumentTypeError(f"region needs finite lo < hi, got {text!r}")
    return lo, hi


def _threads(value: int | None) -> int:
    if value is not None:
        n = value
    else:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"thread count must be positive, got {n}")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="curve-equiv", description="Equivalence tests for two regression curves.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_flags(p):
        p.add_argument("--data", required=True, help="CSV with header group,dose,response")
        p.add_argument("--model1", required=True, help="model id for group 1")
        p.add_argument("--model2", required=True, help="model id for group 2")
        p.add_argument("--region", type=_region, default=None,
                       help="covariate interval lo,hi (default: observed dose range)")

    def output_flags(p, formats=("json", "csv")):
        p.add_argument("--out", default=None, help="output file (default: stdout)")
        if formats:
            p.add_argument("--format", choices=formats, default=formats[0])

    p_fit = sub.add_parser("fit", help="fit both groups and report distances")
    data_flags(p_fit)
    output_flags(p_fit)

    p_test = sub.add_parser("test", help="run one equivalence test")
    data_flags(p_test)
    p_test.add_argument("--method", required=True, choices=sorted(METHOD_FLAGS))
    p_test.add_argument("--eps", type=float, required=True)
    p_test.add_argument("--alpha", type=float, required=True)
    p_test.add_argument("--distance", choices=[d.value for d in Distance], default=None,
                        help="must agree with --method when given")
    p_test.add_argument("--B", type=int, default=300, help="bootstrap replications")
    p_test.add_argument("--seed", type=int, default=0)
    p_test.add_argument("--threads", type=int, default=None)
    p_test.add_argument("--grid", type=int, default=GRID_N, help="grid size for sup searches")
    output_flags(p_test)

    p_sim = sub.add_parser("simulate", help="Monte Carlo rejection rates")
    src = p_sim.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", help="table id, row id or scenario id")
    src.add_argument("--scenario", help="scenario config JSON file")
    p_sim.add_argument("--nsim", type=int, default=None)
    p_sim.add_argument("--B", type=int, default=None)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--threads", type=int, default=None)
    output_flags(p_sim, formats=("csv",))

    p_band = sub.add_parser("bands", help="pointwise confidence band of the difference curve")
    data_flags(p_band)
    p_band.add_argument("--alpha", type=float, default=0.05)
    p_band.add_argument("--grid", type=int, default=DEFAULT_BAND_POINTS)
    output_flags(p_band, formats=("csv",))
    return parser


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _write(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _flatten(d: dict, prefix: str = "") -> list[tuple[str, object]]:
    rows = []
    for key, value in d.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            rows.extend(_flatten(value, name + "."))
        elif isinstance(value, list) and value and all(isinstance(v, dict) for v in value):
            for i, item in enumerate(value, start=1):
                rows.extend(_flatten(item, f"{name}.{i}."))
        elif isinstance(value, list):
            rows.append((name, ";".join("" if v is None else str(v) for v in value)))
        elif isinstance(value, bool):
            rows.append((name, "true" if value else "false"))
        else:
            rows.append((name, "" if value is None else value))
    return rows


def _emit(payload: dict, fmt: str, out: str | None) -> None:
    if fmt == "json":
        _write(json.dumps(payload, indent=2) + "\n", out)
        return
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("field", "value"))
    w.writerows(_flatten(payload))
    _write(buf.getvalue(), out)


def _load(args):
    if not Path(args.data).is_file():
        raise UsageError(f"data file not found: {args.data}")
    s1, s2 = load_samples_csv(args.data, args.region)
    return get_model(args.model1), get_model(args.model2), s1, s2


def _finite(v: float):
    return float(v) if np.isfinite(v) else None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def fit_report(spec1, spec2, s1, s2) -> dict:
    """Per-group estimates plus both distances of the fitted curves."""
    fits = (fit_ols(spec1, s1, check_information=False),
            fit_ols(spec2, s2, check_information=False))
    pf = pair_fits(*fits, s1.region)
    sup = dist_sup(pf)
    groups = []
    for g, f in enumerate(fits, start=1):
        groups.append({
            "group": g,
            "model": f.spec.id,
            "beta_hat": [float(v) for v in f.beta_hat],
            "sigma2_hat": float(f.sigma2_hat),
            "n": int(f.n),
            "ssr": float(f.ssr),
            "condition": _finite(f.condition),
            "information_ok": f.information_ok,
        })
    return {
        "groups": groups,
        "region": [float(pf.region[0]), float(pf.region[1])],
        "lambda": float(pf.lam),
        "d2_hat": float(dist_l2sq(pf)),
        "dsup_hat": float(sup.value),
        "extremal_points": [float(x) for x in sup.extremal_points],
        "extremal_signs": [int(s) for s in sup.signs],
        "plateau": bool(sup.plateau),
    }


def cmd_fit(args) -> int:
    spec1, spec2, s1, s2 = _load(args)
    _emit(fit_report(spec1, spec2, s1, s2), args.format, args.out)
    return EXIT_OK


def _method_distance(method: Method) -> Distance:
    return Distance.L2SQ if method in (Method.L2_ASYMPTOTIC, Method.BOOT_L2) else Distance.SUP


def cmd_test(args) -> int:
    method = METHOD_FLAGS[args.method]
    check_alpha(args.alpha)
    check_eps(args.eps)
    distance = _method_distance(method)
    if args.distance is not None and Distance.parse(args.distance) is not distance:
        raise UsageError(f"--distance {args.distance} conflicts with --method {args.method}")
    workers = _threads(args.threads)
    spec1, spec2, s1, s2 = _load(args)
    if method in (Method.BOOT_L2, Method.BOOT_SUP):
        dist = bootstrap_distribution(spec1, spec2, s1, s2, args.eps, args.B, distance,
                                      args.seed, s1.region, workers)
        outcome = dist.outcome(args.alpha)
    else:
        fits = (fit_ols(spec1, s1), fit_ols(spec2, s2))
        pf = pair_fits(*fits, s1.region)
        if method is Method.L2_ASYMPTOTIC:
            outcome = test_l2_asymptotic(pf, args.eps, args.alpha)
        elif method is Method.SUP_ASYMPTOTIC:
            outcome = test_sup_asymptotic(pf, args.eps, args.alpha, args.grid)
        else:
            outcome = test_band_iu(pf, args.eps, args.alpha, args.grid)
    _emit(outcome.to_dict(), args.format, args.out)
    return EXIT_OK


def _scenarios(args) -> list[ScenarioConfig]:
    overrides = {k: v for k, v in (("nsim", args.nsim), ("B", args.B), ("master_seed", args.seed))
                 if v is not None}
    if args.preset is not None:
        return [c.replace(**overrides) if overrides else c for c in preset(args.preset)]
    path = Path(args.scenario)
    if not path.is_file():
        raise UsageError(f"scenario file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"scenario file {path} is not valid JSON: {exc}") from None
    items = raw if isinstance(raw, list) else [raw]
    cfgs = [ScenarioConfig.from_dict(item) for item in items]
    return [c.replace(**overrides) if overrides else c for c in cfgs]


def cmd_simulate(args) -> int:
    cfgs = _scenarios(args)
    workers = _threads(args.threads)
    results = []
    for cfg in cfgs:
        res = run_scenario(cfg, workers)
        results.append(res)
        summary = ", ".join(f"{c.method.value}@{c.alpha:g}={c.rate:.3f}" for c in res.cells)
        print(f"{cfg.scenario_id}: {summary} ({res.wall_time:.1f}s)", file=sys.stderr)
    if args.out is not None:
        emit_table(results, args.out)
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=TABLE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(table_rows(results))
    return EXIT_OK


def band_rows(pf, alpha: float, points: int) -> list[tuple[float, float, float, float]]:
    """``(x, delta, lower, upper)`` on an equispaced grid over the region."""
    if points < 2:
        raise UsageError(f"--grid needs at least 2 points, got {points}")
    x = np.linspace(pf.region[0], pf.region[1], points)
    delta = diff_profile(pf, x)
    hw = band_halfwidth(pf, x, alpha)
    return [(float(a), float(d), float(d - h), float(d + h)) for a, d, h in zip(x, delta, hw)]


def cmd_bands(args) -> int:
    spec1, spec2, s1, s2 = _load(args)
    fits = (fit_ols(spec1, s1), fit_ols(spec2, s2))
    rows = band_rows(pair_fits(*fits, s1.region), args.alpha, args.grid)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("x", "delta", "lower", "upper"))
    w.writerows((repr(a), repr(d), repr(lo), repr(hi)) for a, d, lo, hi in rows)
    _write(buf.getvalue(), args.out)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "test": cmd_test, "simulate": cmd_simulate, "bands": cmd_bands}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return COMMANDS[args.command](args)
    except NonUniqueExtremum as exc:
        print(f"error: {exc}\nhint: the extremum is not unique; use --method boot-sup",
              file=sys.stderr)
        return EXIT_NUMERICAL
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, CurveEquivError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
