"""Distances between two fitted curves and the variance functionals built on them.

All integrals over the covariate region use a fixed Gauss-Legendre rule; the
maximal deviation is located by a dense grid scan followed by golden-section
refinement of every grid-local maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.stats import norm

from .errors import DomainError
from .fitting import PairedFit
from .models import ModelSpec

QUAD_ORDER = 64
GRID_N = 2001
TOL_REL = 1e-3
GOLDEN_TOL = 1e-10
# relative closeness to the maximum for a grid point to count towards a plateau
PLATEAU_RTOL = 1e-9
PLATEAU_MIN_RUN = 3

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


class Distance(str, Enum):
    L2SQ = "l2sq"
    SUP = "sup"

    @classmethod
    def parse(cls, value: "Distance | str") -> "Distance":
        if isinstance(value, Distance):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DomainError(f"distance must be 'l2sq' or 'sup', got {value!r}") from None


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and positive weights integrating over ``region``."""

    nodes: np.ndarray
    weights: np.ndarray
    region: tuple[float, float]
    order: int

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Apply the rule along the last axis of ``values``."""
        return values @ self.weights


def gauss_legendre(region: tuple[float, float], order: int = QUAD_ORDER) -> QuadratureRule:
    lo, hi = float(region[0]), float(region[1])
    t, w = np.polynomial.legendre.leggauss(order)
    half = 0.5 * (hi - lo)
    nodes = lo + half * (t + 1.0)
    weights = half * w
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(nodes, weights, (lo, hi), order)


def _rule_for(pf: PairedFit, quad: QuadratureRule | None) -> QuadratureRule:
    return gauss_legendre(pf.region) if quad is None else quad


# ---------------------------------------------------------------------------
# Normal quantiles
# ---------------------------------------------------------------------------

def normal_quantile(p: float) -> float:
    return float(norm.ppf(p))


def normal_cdf(z: float) -> float:
    return float(norm.cdf(z))


# ---------------------------------------------------------------------------
# Difference profile and distances
# ---------------------------------------------------------------------------

def diff_values(spec1: ModelSpec, b1, spec2: ModelSpec, b2, x) -> np.ndarray:
    """``m1(x, b1) - m2(x, b2)``; parameters may carry matching batch dimensions."""
    return spec1.values(x, b1) - spec2.values(x, b2)


def diff_profile(pf: PairedFit, x):
    """Estimated difference curve at ``x`` (scalar in, scalar out)."""
    out = diff_values(pf.spec1, pf.beta1, pf.spec2, pf.beta2, x)
    return float(out[0]) if np.ndim(x) == 0 else out


def l2sq_params(spec1: ModelSpec, b1, spec2: ModelSpec, b2, quad: QuadratureRule) -> np.ndarray:
    """Squared L2 distance for (batches of) parameter pairs."""
    d = diff_values(spec1, b1, spec2, b2, quad.nodes)
    return quad.integrate(d * d)


def dist_l2sq(pf: PairedFit, quad: QuadratureRule | None = None) -> float:
    quad = _rule_for(pf, quad)
    return float(l2sq_params(pf.spec1, pf.beta1, pf.spec2, pf.beta2, quad))


@dataclass(frozen=True)
class SupResult:
    """Maximal absolute deviation and where it is attained.

    ``signs[i]`` is ``+1`` where the difference equals ``+value`` and ``-1``
    where it equals ``-value``.  With ``plateau`` set, ``plateaus`` lists the
    grid endpoints of each near-maximal run and those endpoints are also
    included in ``extremal_points``.
    """

    value: float
    extremal_points: tuple[float, ...]
    signs: tuple[int, ...]
    plateau: bool = False
    plateaus: tuple[tuple[float, float], ...] = ()
    argmax: float = float("nan")

    @property
    def unique(self) -> bool:
        return not self.plateau and len(self.extremal_points) == 1


def golden_max(f, a: np.ndarray, b: np.ndarray, tol: float = GOLDEN_TOL):
    """Vectorised golden-section maximisation of ``f`` on brackets ``[a, b]``.

    ``f`` maps an array of points (one per bracket) to values.  Returns the
    best point seen per bracket and its value; bracket endpoints are included
    as candidates so monotone pieces converge to the edge.
    """
    a = np.array(a, float)
    b = np.array(b, float)
    fa, fb = f(a), f(b)
    best_x = np.where(fa >= fb, a, b)
    best_f = np.maximum(fa, fb)
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while np.any(b - a > tol):
        left = fc >= fd
        # keep [a, d] when f(c) is larger, otherwise [c, b]
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = np.where(left, b - _INVPHI * (b - a), d)
        new_d = np.where(left, c, a + _INVPHI * (b - a))
        fnew = f(np.where(left, new_c, new_d))
        fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
        c, d = new_c, new_d
    for xs, fs in ((c, fc), (d, fd)):
        better = fs > best_f
        best_x = np.where(better, xs, best_x)
        best_f = np.where(better, fs, best_f)
    return best_x, best_f


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive index ranges of consecutive ``True`` entries."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [(int(s), int(e) - 1) for s, e in zip(edges[::2], edges[1::2])]


def sup_profile(fun, region: tuple[float, float], grid_n: int = GRID_N,
                tol_rel: float = TOL_REL) -> SupResult:
    """Locate ``max |fun(x)|`` over ``region``; ``fun`` is vectorised in ``x``."""
    if grid_n < 2:
        raise DomainError("grid_n must be at least 2")
    lo, hi = region
    grid = np.linspace(lo, hi, grid_n)
    h = grid[1] - grid[0]
    vals = fun(grid)
    a = np.abs(vals)
    top = float(a.max())

    plateaus: list[tuple[float, float]] = []
    in_plateau = np.zeros(grid_n, bool)
    # with top == 0 every grid point qualifies: the whole region is extremal
    for s, e in _runs(a >= top * (1.0 - PLATEAU_RTOL)):
        if e - s + 1 >= PLATEAU_MIN_RUN:
            plateaus.append((float(grid[s]), float(grid[e])))
            in_plateau[s:e + 1] = True

    left = np.concatenate([[-np.inf], a[:-1]])
    right = np.concatenate([a[1:], [-np.inf]])
    local = (a >= left) & (a >= right) & ~in_plateau
    # refinement can only gain O(h^2); skip peaks that cannot compete
    local &= a >= top * (1.0 - 10.0 * tol_rel) - 1e-300
    idx = np.flatnonzero(local)

    pts: list[float] = []
    vals_ref: list[float] = []
    if idx.size:
        xa = grid[np.maximum(idx - 1, 0)]
        xb = grid[np.minimum(idx + 1, grid_n - 1)]
        xr, fr = golden_max(lambda x: np.abs(fun(x)), xa, xb)
        order = np.argsort(xr, kind="stable")
        for x, v in zip(xr[order], fr[order]):
            if pts and x - pts[-1] < 1.5 * h:
                if v > vals_ref[-1]:
                    pts[-1], vals_ref[-1] = float(x), float(v)
                continue
            pts.append(float(x))
            vals_ref.append(float(v))

    value = max([top] + vals_ref) if plateaus else max(vals_ref, default=top)
    if vals_ref and max(vals_ref) >= value:
        x_best = pts[int(np.argmax(vals_ref))]
    else:
        x_best = plateaus[0][0] if plateaus else float(grid[int(a.argmax())])
    keep = [(x, v) for x, v in zip(pts, vals_ref) if v >= (1.0 - tol_rel) * value]
    points = [x for x, _ in keep]
    for s, e in plateaus:
        points.extend([s, e] if e > s else [s])
    points = sorted(set(points))
    signs = tuple(int(np.sign(v)) if v != 0 else 1 for v in fun(np.array(points, float)))
    return SupResult(float(value), tuple(points), signs, bool(plateaus), tuple(plateaus),
                     float(x_best))


def dist_sup(pf: PairedFit, grid_n: int = GRID_N, tol_rel: float = TOL_REL) -> SupResult:
    """Maximal absolute deviation between the two fitted curves."""
    return sup_params(pf.spec1, pf.beta1, pf.spec2, pf.beta2, pf.region, grid_n, tol_rel)


def sup_params(spec1: ModelSpec, b1, spec2: ModelSpec, b2, region,
               grid_n: int = GRID_N, tol_rel: float = TOL_REL) -> SupResult:
    b1 = np.asarray(b1, float)
    b2 = np.asarray(b2, float)
    return sup_profile(lambda x: diff_values(spec1, b1, spec2, b2, x), region, grid_n, tol_rel)


def sup_batch(spec1: ModelSpec, b1: np.ndarray, spec2: ModelSpec, b2: np.ndarray, region,
              grid_n: int = GRID_N, chunk: int = 128) -> np.ndarray:
    """Maximal deviation for many parameter pairs at once.

    The grid maximum of every row is refined by golden-section search on its
    two neighbouring cells.  When two separated peaks are equal to within the
    grid resolution the refined value can differ from :func:`dist_sup` by the
    O(h^2) height difference between them.
    """
    b1 = np.atleast_2d(np.asarray(b1, float))
    b2 = np.atleast_2d(np.asarray(b2, float))
    lo, hi = region
    grid = np.linspace(lo, hi, grid_n)
    out = np.empty(b1.shape[0])
    for s in range(0, b1.shape[0], chunk):
        p1, p2 = b1[s:s + chunk], b2[s:s + chunk]
        a = np.abs(diff_values(spec1, p1, spec2, p2, grid))
        j = a.argmax(axis=1)
        xa = grid[np.maximum(j - 1, 0)]
        xb = grid[np.minimum(j + 1, grid_n - 1)]

        def f(x, p1=p1, p2=p2):
            return np.abs(spec1.values_paired(x, p1) - spec2.values_paired(x, p2))

        _, fr = golden_max(f, xa, xb)
        out[s:s + chunk] = np.maximum(fr, a.max(axis=1))
    return out


# ---------------------------------------------------------------------------
# Kernel and variances
# ---------------------------------------------------------------------------

def _grads(pf: PairedFit, x):
    x = np.atleast_1d(np.asarray(x, float))
    return pf.spec1.gradients(x, pf.beta1), pf.spec2.gradients(x, pf.beta2)


def kernel_matrix(pf: PairedFit, x, y) -> np.ndarray:
    """``[k(x_i, y_j)]`` for covariate arrays ``x`` and ``y``."""
    lam = pf.lam
    S1 = pf.fit1.Sigma_inv()
    S2 = pf.fit2.Sigma_inv()
    g1x, g2x = _grads(pf, x)
    g1y, g2y = _grads(pf, y)
    return lam * (g1x @ S1 @ g1y.T) + lam / (lam - 1.0) * (g2x @ S2 @ g2y.T)


def kernel_k(pf: PairedFit, x, y):
    """Covariance kernel of the limiting process of the estimated difference."""
    K = kernel_matrix(pf, x, y)
    if np.ndim(x) == 0 and np.ndim(y) == 0:
        return float(K[0, 0])
    return K


def var_l2(pf: PairedFit, quad: QuadratureRule | None = None) -> float:
    """Asymptotic variance of ``sqrt(n) (d2_hat - d2)``: ``4 * int int D D k``."""
    quad = _rule_for(pf, quad)
    w = quad.weights * diff_profile(pf, quad.nodes)
    K = kernel_matrix(pf, quad.nodes, quad.nodes)
    return float(4.0 * (w @ K @ w))


def var_sup_unique(pf: PairedFit, x0: float) -> float:
    """Asymptotic variance of the maximal deviation at a unique extremal point."""
    return kernel_k(pf, float(x0), float(x0))


def band_variance(pf: PairedFit, x) -> np.ndarray:
    """Pointwise variance ``sum_l g_l^T Sigma_l^{-1} g_l / n_l`` of the difference."""
    g1, g2 = _grads(pf, x)
    S1 = pf.fit1.Sigma_inv()
    S2 = pf.fit2.Sigma_inv()
    v1 = np.einsum("kp,pq,kq->k", g1, S1, g1)
    v2 = np.einsum("kp,pq,kq->k", g2, S2, g2)
    return v1 / pf.fit1.n + v2 / pf.fit2.n


def band_halfwidth(pf: PairedFit, x, alpha: float):
    """Half-width ``z_{1-alpha} * tau(x)`` of the pointwise band for the difference."""
    if not 0.0 < alpha <= 0.5:
        raise DomainError(f"alpha must lie in (0, 0.5], got {alpha}")
    tau = np.sqrt(np.maximum(band_variance(pf, x), 0.0))
    out = normal_quantile(1.0 - alpha) * tau
    return float(out[0]) if np.ndim(x) == 0 else out
