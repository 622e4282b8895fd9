"""Per-group ordinary least squares with multi-start, and the paired fit."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.stats import qmc

from .data import GroupSample, design_weights
from .errors import DegenerateAllocation, DimensionMismatch, NonConvergence, SingularInformation
from .models import ModelSpec
from .solver import levenberg_marquardt

N_RANDOM_STARTS = 10
N_PROFILE_GRID = 64
COND_LIMIT = 1e12
TIE_SSR = 1e-12


@dataclass(frozen=True)
class FitResult:
    """Unconstrained least-squares fit of one group.

    ``sigma2_hat`` uses divisor ``n``.  ``Sigma_hat`` is the information
    matrix ``sum_i (n_i/n) g_i g_i^T / sigma2_hat`` at ``beta_hat``.
    """

    spec: ModelSpec
    sample: GroupSample
    beta_hat: np.ndarray
    sigma2_hat: float
    Sigma_hat: np.ndarray
    n: int
    ssr: float
    converged: bool
    n_starts_used: int
    info_unscaled: np.ndarray
    condition: float

    @property
    def information_ok(self) -> bool:
        return bool(np.isfinite(self.condition) and self.condition < COND_LIMIT)

    def Sigma_inv(self) -> np.ndarray:
        """Inverse information matrix, ``sigma2_hat * M^{-1}``."""
        if not self.information_ok:
            raise SingularInformation(
                f"{self.spec.id} fit: information matrix condition number "
                f"{self.condition:.3g} exceeds {COND_LIMIT:.0e}"
            )
        d = 1.0 / np.sqrt(np.diag(self.info_unscaled))
        scaled = self.info_unscaled * d[:, None] * d[None, :]
        return self.sigma2_hat * (np.linalg.inv(scaled) * d[:, None] * d[None, :])


@dataclass(frozen=True)
class PairedFit:
    fit1: FitResult
    fit2: FitResult
    region: tuple[float, float]
    lam: float

    @property
    def n(self) -> int:
        return self.fit1.n + self.fit2.n

    @property
    def spec1(self) -> ModelSpec:
        return self.fit1.spec

    @property
    def spec2(self) -> ModelSpec:
        return self.fit2.spec

    @property
    def beta1(self) -> np.ndarray:
        return self.fit1.beta_hat

    @property
    def beta2(self) -> np.ndarray:
        return self.fit2.beta_hat


def pair_fits(fit1: FitResult, fit2: FitResult, region=None) -> PairedFit:
    """Combine two group fits; ``lam = (n1 + n2) / n1``."""
    if fit2.n == 0 or fit1.n == 0:
        raise DegenerateAllocation("both groups need observations (lambda must exceed 1)")
    if region is None:
        region = fit1.sample.region
    region = (float(region[0]), float(region[1]))
    return PairedFit(fit1, fit2, region, (fit1.n + fit2.n) / fit1.n)


# ---------------------------------------------------------------------------
# Multi-start construction
# ---------------------------------------------------------------------------

def _map_unit(u: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if lo > 0 and hi / lo >= 100.0:
        return lo * (hi / lo) ** u
    return lo + (hi - lo) * u


@lru_cache(maxsize=64)
def _halton(dim: int, count: int, skip: int) -> np.ndarray:
    # unscrambled, deterministic; the first point (origin) is skipped
    pts = qmc.Halton(d=dim, scramble=False).random(count + skip + 1)
    return pts[skip + 1:]


class StartBuilder:
    """Data-adapted start points for one family and design.

    Nonlinear parameters are placed on a Halton sequence in the box; the
    conditionally linear ones are filled in by weighted least squares against
    the dose-level means, so every start is already a sensible curve.
    """

    def __init__(self, spec: ModelSpec, doses: np.ndarray, counts: np.ndarray,
                 n_random: int = N_RANDOM_STARTS, skip: int = 0, corners: bool = False):
        self.spec = spec
        p = spec.p
        lin = list(spec.linear_indices)
        nonlin = [j for j in range(p) if j not in lin]
        if not nonlin:
            n_tpl = 1
            templates = np.zeros((1, p))
        else:
            n_tpl = max(n_random, 0)
            u = _halton(len(nonlin), n_tpl, skip) if n_tpl else np.zeros((0, len(nonlin)))
            templates = np.tile(0.5 * (spec.lower + spec.upper), (n_tpl, 1))
            if lin:
                templates[:, lin] = 0.0
            for c, j in enumerate(nonlin):
                templates[:, j] = _map_unit(u[:, c], spec.lower[j], spec.upper[j])
            if corners:
                # box corners of the nonlinear block: optima on a face start exactly there
                grid = np.array(np.meshgrid(*[(spec.lower[j], spec.upper[j]) for j in nonlin],
                                            indexing="ij")).reshape(len(nonlin), -1).T
                extra = np.tile(templates[:1], (grid.shape[0], 1))
                extra[:, nonlin] = grid
                templates = np.concatenate([templates, extra])
        self.templates = templates
        self.lin = lin
        self.proj = None
        if lin and n_tpl:
            sw = np.sqrt(counts.astype(float))
            G = spec.gradients(doses, templates)[..., lin]        # (s, k, L)
            Gw = G * sw[None, :, None]
            pinv = np.linalg.pinv(Gw)                              # (s, L, k)
            self.proj = pinv * sw[None, None, :]

    @property
    def count(self) -> int:
        return self.templates.shape[0]

    def profile_start(self, ybar: np.ndarray, counts: np.ndarray, doses: np.ndarray) -> np.ndarray:
        """Best template per data set by weighted SSR after the linear fill-in -> ``(m, 1, p)``.

        With a dense template set this is a grid search of the profile
        least-squares criterion over the nonlinear parameters.
        """
        cand = self.starts(ybar)                                   # (m, s, p)
        resid = ybar[:, None, :] - self.spec.values(doses, cand)
        ssr = (counts * resid * resid).sum(axis=-1)
        ssr = np.where(np.isfinite(ssr), ssr, np.inf)
        best = np.argmin(ssr, axis=1)
        return cand[np.arange(cand.shape[0]), best][:, None, :]

    def starts(self, ybar: np.ndarray) -> np.ndarray:
        """Start points for a batch of dose-mean vectors ``(m, k)`` -> ``(m, s, p)``."""
        ybar = np.atleast_2d(ybar)
        out = np.broadcast_to(self.templates, (ybar.shape[0],) + self.templates.shape).copy()
        if self.proj is not None:
            lin_vals = (self.proj[None, :, :, :] * ybar[:, None, None, :]).sum(axis=-1)
            out[..., self.lin] = lin_vals
        return np.clip(out, self.spec.lower, self.spec.upper)


# ---------------------------------------------------------------------------
# Batched group fit
# ---------------------------------------------------------------------------

def fit_batch(spec: ModelSpec, doses: np.ndarray, counts: np.ndarray, ybar: np.ndarray,
              starts: np.ndarray, within=0.0):
    """Fit many data sets of one design at once.

    Parameters
    ----------
    ybar : (m, k) dose-level means, one row per data set.
    starts : (m, s, p) start points per data set.
    within : (m,) within-dose sums of squares (the constant part of the SSR).

    Returns
    -------
    beta : (m, p) best converged estimate per data set (NaN row if none).
    ssr : (m,) total sum of squared residuals at ``beta``.
    ok : (m,) whether any start converged.
    """
    ybar = np.atleast_2d(np.asarray(ybar, float))
    m = ybar.shape[0]
    s, p = starts.shape[1], spec.p
    sw = np.sqrt(np.asarray(counts, float))
    within = np.broadcast_to(np.asarray(within, float), (m,))
    y_rep = np.repeat(ybar, s, axis=0)

    def fun(theta, rows):
        r = sw * (y_rep[rows] - spec.values(doses, theta))
        J = -sw[None, :, None] * spec.gradients(doses, theta)
        return r, J

    res = levenberg_marquardt(fun, starts.reshape(m * s, p), spec.lower, spec.upper,
                              offset=np.repeat(within, s))
    cost = res.cost.reshape(m, s) + within[:, None]
    return _pick_best(res.theta.reshape(m, s, p), cost, res.converged.reshape(m, s))


def _pick_best(theta: np.ndarray, cost: np.ndarray, conv: np.ndarray):
    m, s, p = theta.shape
    c = np.where(conv, cost, np.inf)
    best = c.min(axis=1)
    ok = np.isfinite(best)
    cand = conv & (c <= best[:, None] + TIE_SSR)
    for j in range(p):
        vals = np.where(cand, theta[..., j], np.inf)
        cand &= vals == vals.min(axis=1, keepdims=True)
    pick = np.argmax(cand, axis=1)
    beta = theta[np.arange(m), pick]
    beta[~ok] = np.nan
    return beta, np.where(ok, best, np.nan), ok


def _validate_starts(spec: ModelSpec, starts) -> np.ndarray:
    if starts is None:
        return np.zeros((0, spec.p))
    arr = np.atleast_2d(np.asarray(starts, float))
    if arr.shape[1] != spec.p:
        raise DimensionMismatch(f"start points for {spec.id!r} need {spec.p} entries")
    return np.clip(arr, spec.lower, spec.upper)


def information_matrix(spec: ModelSpec, doses, weights, beta) -> np.ndarray:
    """``sum_i w_i g(x_i) g(x_i)^T`` without the 1/sigma^2 factor."""
    G = spec.gradients(doses, beta)
    return (weights[:, None, None] * G[:, :, None] * G[:, None, :]).sum(axis=0)


def scaled_condition(M: np.ndarray) -> float:
    """Condition number after symmetric diagonal scaling (unit invariant)."""
    diag = np.diag(M)
    if np.any(~np.isfinite(M)) or np.any(diag <= 0):
        return np.inf
    d = 1.0 / np.sqrt(diag)
    with np.errstate(all="ignore"):
        cond = float(np.linalg.cond(M * d[:, None] * d[None, :]))
    return cond if np.isfinite(cond) else np.inf


def fit_ols(spec: ModelSpec, sample: GroupSample, starts=None,
            n_random: int = N_RANDOM_STARTS, check_information: bool = True) -> FitResult:
    """Least-squares fit of one group over the family's parameter box.

    The start set is ``starts`` (optional, user supplied) plus ``n_random``
    data-adapted quasi-random points; the best converged SSR wins.  If none
    converges, a profile grid over the nonlinear parameters (box corners
    included) supplies one more start.

    Raises
    ------
    NonConvergence
        No start met the convergence criteria.
    SingularInformation
        ``check_information`` is set and the information matrix is
        numerically singular at the estimate.
    """
    if sample.n < spec.p:
        warnings.warn(
            f"{spec.id}: {sample.n} observations for {spec.p} parameters", RuntimeWarning,
            stacklevel=2,
        )
    doses, counts, ybar = sample.doses, sample.counts, sample.means
    user = _validate_starts(spec, starts)
    auto = StartBuilder(spec, doses, counts, n_random).starts(ybar)[0]
    all_starts = np.concatenate([user, auto])[None]
    beta, ssr, ok = fit_batch(spec, doses, counts, ybar[None], all_starts, sample.within_ss)
    n_starts = all_starts.shape[1]
    if not ok[0]:
        # When the infimum lies on a face of the box (say an exponential rate at its
        # bound with the slope shrinking to match), LM from interior starts crawls
        # along the ridge without converging; the profile grid includes the box
        # corners, so it starts such fits on the face itself.
        prof = StartBuilder(spec, doses, counts, N_PROFILE_GRID, corners=True)
        beta, ssr, ok = fit_batch(spec, doses, counts, ybar[None],
                                  prof.profile_start(ybar[None], counts, doses), sample.within_ss)
        n_starts += 1
    if not ok[0]:
        raise NonConvergence(f"{spec.id}: no start point converged")
    beta = beta[0]
    ssr = float(max(ssr[0], 0.0))
    sigma2 = ssr / sample.n
    M = information_matrix(spec, doses, design_weights(sample), beta)
    cond = scaled_condition(M)
    with np.errstate(all="ignore"):
        Sigma = M / sigma2 if sigma2 > 0 else np.full_like(M, np.inf)
    fit = FitResult(spec, sample, beta, sigma2, Sigma, sample.n, ssr, True,
                    n_starts, M, cond)
    if check_information and not fit.information_ok:
        raise SingularInformation(
            f"{spec.id}: information matrix is singular (condition {cond:.3g})"
        )
    return fit
