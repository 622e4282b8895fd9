"""Grouped dose-response samples: CSV ingestion, export and simulation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, EmptyGroup, ParseError, UsageError
from .models import ModelSpec

CSV_HEADER = ("group", "dose", "response")


@dataclass(frozen=True)
class GroupSample:
    """One group's observations, grouped by dose level.

    ``responses[i]`` holds the replicate responses observed at ``doses[i]``.
    Doses are strictly increasing and lie in ``region``.
    """

    doses: np.ndarray
    responses: tuple[np.ndarray, ...]
    region: tuple[float, float]

    def __post_init__(self):
        doses = np.asarray(self.doses, float)
        resp = tuple(np.asarray(r, float).ravel() for r in self.responses)
        lo, hi = (float(v) for v in self.region)
        if doses.ndim != 1 or doses.size < 1:
            raise UsageError("a group needs at least one dose level")
        if len(resp) != doses.size:
            raise UsageError("one response vector per dose level is required")
        if np.any(np.diff(doses) <= 0):
            raise UsageError("doses must be strictly increasing")
        if not lo < hi:
            raise UsageError(f"invalid region [{lo}, {hi}]")
        if doses[0] < lo or doses[-1] > hi:
            raise DomainError(f"doses outside region [{lo}, {hi}]")
        if any(r.size < 1 for r in resp):
            raise UsageError("every dose level needs at least one response")
        doses.setflags(write=False)
        for r in resp:
            r.setflags(write=False)
        object.__setattr__(self, "doses", doses)
        object.__setattr__(self, "responses", resp)
        object.__setattr__(self, "region", (lo, hi))

    @property
    def k(self) -> int:
        return self.doses.size

    @property
    def counts(self) -> np.ndarray:
        return np.array([r.size for r in self.responses], dtype=np.int64)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def means(self) -> np.ndarray:
        return np.array([r.mean() for r in self.responses])

    @property
    def within_ss(self) -> float:
        """Sum of squares of responses around their dose-level means."""
        return float(sum(((r - r.mean()) ** 2).sum() for r in self.responses))

    def weights(self) -> np.ndarray:
        return design_weights(self)

    def with_region(self, region: tuple[float, float]) -> "GroupSample":
        return GroupSample(self.doses, self.responses, region)


def design_weights(sample: GroupSample) -> np.ndarray:
    """Allocation proportions n_i / n at each dose (positive, summing to 1)."""
    counts = sample.counts.astype(float)
    w = counts / counts.sum()
    assert np.all(w > 0) and abs(w.sum() - 1.0) < 1e-12
    return w


def sample_from_arrays(doses, responses, region=None) -> GroupSample:
    """Build a sample from flat per-observation arrays."""
    doses = np.asarray(doses, float)
    responses = np.asarray(responses, float)
    levels = np.unique(doses)
    grouped = tuple(responses[doses == d] for d in levels)
    if region is None:
        region = (float(levels[0]), float(levels[-1]))
    return GroupSample(levels, grouped, region)


def _parse_float(text: str, what: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{what} {text!r} is not a decimal number", line) from None
    if not math.isfinite(value):
        raise ParseError(f"{what} {text!r} is not finite", line)
    return value


def load_samples_csv(path, region: tuple[float, float] | None = None) -> tuple[GroupSample, GroupSample]:
    """Read a ``group,dose,response`` CSV into the two group samples.

    The region defaults to the dose range observed across both groups.
    """
    path = Path(path)
    rows: dict[int, tuple[list[float], list[float]]] = {1: ([], []), 2: ([], [])}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip().lower() for h in header) != CSV_HEADER:
            raise ParseError(f"expected header {','.join(CSV_HEADER)}, got {header}", 1)
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line)
            g_txt = row[0].strip()
            if g_txt not in ("1", "2"):
                raise ParseError(f"group must be 1 or 2, got {g_txt!r}", line)
            dose = _parse_float(row[1].strip(), "dose", line)
            resp = _parse_float(row[2].strip(), "response", line)
            rows[int(g_txt)][0].append(dose)
            rows[int(g_txt)][1].append(resp)
    for g in (1, 2):
        if not rows[g][0]:
            raise EmptyGroup(f"group {g} has no observations in {path}")
    if region is None:
        all_doses = rows[1][0] + rows[2][0]
        region = (min(all_doses), max(all_doses))
        if region[0] == region[1]:
            raise UsageError("all doses coincide; pass an explicit region")
    return (
        sample_from_arrays(rows[1][0], rows[1][1], region),
        sample_from_arrays(rows[2][0], rows[2][1], region),
    )


def write_samples_csv(path, s1: GroupSample, s2: GroupSample) -> None:
    """Write both samples in the ingestion format; floats round-trip exactly."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for g, s in ((1, s1), (2, s2)):
            for d, resp in zip(s.doses, s.responses):
                for y in resp:
                    w.writerow((g, repr(float(d)), repr(float(y))))


def simulate_sample(
    spec: ModelSpec,
    b,
    doses: Sequence[float],
    counts: Sequence[int],
    sigma2: float,
    rng: np.random.Generator,
    region: tuple[float, float] | None = None,
) -> GroupSample:
    """Draw ``Y = m(x_i, b) + N(0, sigma2)`` at each dose, in dose order."""
    from .models import eval_model

    doses = np.asarray(doses, float)
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != doses.shape or np.any(counts < 1):
        raise UsageError("counts must be positive, one per dose")
    if not sigma2 > 0:
        raise UsageError("sigma2 must be positive")
    mean = eval_model(spec, doses, b)
    noise = rng.normal(0.0, math.sqrt(sigma2), size=int(counts.sum()))
    split = np.split(noise, np.cumsum(counts)[:-1])
    if region is None:
        region = (float(doses[0]), float(doses[-1]))
    return GroupSample(doses, tuple(m + e for m, e in zip(mean, split)), region)
