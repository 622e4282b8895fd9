"""Least squares on the null manifold ``d(beta1, beta2) = eps``.

The equality constraint is handled by an augmented Lagrangian: the penalty
``mu * c**2 + nu * c`` equals ``mu * (c + nu / (2 mu))**2`` up to a constant,
so it enters the stacked two-group problem as one extra residual and the
same Levenberg-Marquardt core used for ordinary fits does the inner solves.

For the maximal deviation the constraint is smoothed by a log-mean-exp soft
maximum whose temperature is annealed.  The smoothed solution is polished
with the exact maximum (gradient taken at the refined global argmax) and
finally projected onto the grid-refined constraint with Newton steps in the
metric of the least-squares Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import GroupSample
from .errors import ConstraintInfeasible, NonConvergence
from .fitting import TIE_SSR, FitResult, PairedFit, fit_ols
from .metrics import GRID_N, Distance, QuadratureRule, gauss_legendre, l2sq_params, sup_params
from .models import ModelSpec
from .solver import levenberg_marquardt

MU_START = 1.0
MU_GROWTH = 10.0
MU_CAP = 1e8
FEAS_TOL = 1e-6
SOFT_GRID_N = 401
SOFT_TEMPERATURES = (100.0, 1e3, 1e4)
MAX_OUTER = 40
MAX_PROJECTION = 60


@dataclass(frozen=True)
class ConstrainedFit:
    """Pooled least-squares fit restricted to ``d(beta1, beta2) = eps``."""

    beta1_tilde: np.ndarray
    beta2_tilde: np.ndarray
    constraint_residual: float
    objective: float
    converged: bool
    used_constrained: bool
    distance: Distance
    eps: float
    n_starts: int = 0


def feasibility_tol(eps: float) -> float:
    return FEAS_TOL * max(1.0, eps)


class _Problem:
    """Stacked residuals of both groups on dose means."""

    def __init__(self, spec1: ModelSpec, spec2: ModelSpec, s1: GroupSample, s2: GroupSample):
        self.spec1, self.spec2 = spec1, spec2
        self.p1, self.p2 = spec1.p, spec2.p
        self.x1, self.x2 = s1.doses, s2.doses
        self.sw1 = np.sqrt(s1.counts.astype(float))
        self.sw2 = np.sqrt(s2.counts.astype(float))
        self.y1, self.y2 = s1.means, s2.means
        self.within = s1.within_ss + s2.within_ss
        self.lower = np.concatenate([spec1.lower, spec2.lower])
        self.upper = np.concatenate([spec1.upper, spec2.upper])

    def split(self, theta: np.ndarray):
        return theta[..., :self.p1], theta[..., self.p1:]

    def data_residuals(self, theta: np.ndarray):
        b1, b2 = self.split(theta)
        r = np.concatenate([
            self.sw1 * (self.y1 - self.spec1.values(self.x1, b1)),
            self.sw2 * (self.y2 - self.spec2.values(self.x2, b2)),
        ], axis=-1)
        q = theta.shape[0]
        k1, k2 = self.x1.size, self.x2.size
        J = np.zeros((q, k1 + k2, self.p1 + self.p2))
        J[:, :k1, :self.p1] = -self.sw1[None, :, None] * self.spec1.gradients(self.x1, b1)
        J[:, k1:, self.p1:] = -self.sw2[None, :, None] * self.spec2.gradients(self.x2, b2)
        return r, J

    def objective(self, theta: np.ndarray) -> np.ndarray:
        r, _ = self.data_residuals(np.atleast_2d(theta))
        return (r * r).sum(axis=-1) + self.within


class _L2Constraint:
    def __init__(self, prob: _Problem, quad: QuadratureRule, eps: float):
        self.prob, self.quad, self.eps = prob, quad, eps

    def __call__(self, theta):
        p = self.prob
        b1, b2 = p.split(theta)
        x = self.quad.nodes
        d = p.spec1.values(x, b1) - p.spec2.values(x, b2)               # (q, Q)
        wd = d * self.quad.weights
        c = wd @ d if d.ndim == 1 else (wd * d).sum(axis=-1)
        g1 = 2.0 * np.einsum("qk,qkp->qp", wd, p.spec1.gradients(x, b1))
        g2 = -2.0 * np.einsum("qk,qkp->qp", wd, p.spec2.gradients(x, b2))
        return c - self.eps, np.concatenate([g1, g2], axis=-1)

    def exact(self, theta) -> float:
        b1, b2 = self.prob.split(theta)
        return float(l2sq_params(self.prob.spec1, b1, self.prob.spec2, b2, self.quad)) - self.eps


class _SoftSupConstraint:
    def __init__(self, prob: _Problem, region, eps: float, temperature: float):
        self.prob, self.eps, self.temperature = prob, eps, temperature
        self.region = region
        self.grid = np.linspace(region[0], region[1], SOFT_GRID_N)

    def __call__(self, theta):
        p = self.prob
        b1, b2 = p.split(theta)
        x = self.grid
        d = p.spec1.values(x, b1) - p.spec2.values(x, b2)               # (q, G)
        # log-mean-exp of the scaled differences: exact for a constant
        # profile and never above the grid maximum
        t = self.temperature / self.eps
        s = np.concatenate([d, -d], axis=-1) * t
        top = s.max(axis=-1, keepdims=True)
        e = np.exp(s - top)
        tot = e.sum(axis=-1, keepdims=True)
        smax = (top[:, 0] + np.log(tot[:, 0] / s.shape[-1])) / t
        pi = e / tot
        G = x.size
        wsign = pi[:, :G] - pi[:, G:]                                    # d smax / d Delta
        g1 = np.einsum("qk,qkp->qp", wsign, p.spec1.gradients(x, b1))
        g2 = -np.einsum("qk,qkp->qp", wsign, p.spec2.gradients(x, b2))
        return smax - self.eps, np.concatenate([g1, g2], axis=-1)

    def exact(self, theta) -> float:
        b1, b2 = self.prob.split(theta)
        return sup_params(self.prob.spec1, b1, self.prob.spec2, b2, self.region).value - self.eps


def _alm(prob: _Problem, constraint, theta0: np.ndarray, tol: float):
    """Augmented-Lagrangian solve from each row of ``theta0``.

    Returns the final iterates, their multipliers and whether the penalty
    reached its cap without meeting ``tol``.
    """
    theta = np.array(theta0, float)
    m = theta.shape[0]
    mu = np.full(m, MU_START)
    nu = np.zeros(m)
    c_prev = np.full(m, np.inf)
    active = np.ones(m, bool)
    capped = np.zeros(m, bool)
    for _ in range(MAX_OUTER):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break

        def fun(th, rows, idx=idx):
            g = idx[rows]
            r, J = prob.data_residuals(th)
            c, dc = constraint(th)
            sm = np.sqrt(mu[g])
            r_pen = sm * (c + nu[g] / (2.0 * mu[g]))
            J_pen = sm[:, None] * dc
            return (np.concatenate([r, r_pen[:, None]], axis=1),
                    np.concatenate([J, J_pen[:, None, :]], axis=1))

        res = levenberg_marquardt(fun, theta[idx], prob.lower, prob.upper, offset=prob.within)
        theta[idx] = res.theta
        c, _ = constraint(theta[idx])
        done = np.abs(c) <= tol
        active[idx[done]] = False
        go = ~done
        gi = idx[go]
        nu[gi] += 2.0 * mu[gi] * c[go]
        slow = np.abs(c[go]) > 0.25 * np.abs(c_prev[gi])
        grow = gi[slow]
        mu[grow] *= MU_GROWTH
        over = grow[mu[grow] > MU_CAP]
        capped[over] = True
        active[over] = False
        c_prev[idx] = c
    return theta, nu, capped


def _project(prob: _Problem, constraint, theta: np.ndarray, tol: float):
    """Newton projection onto ``constraint.exact == 0`` in the least-squares metric."""
    th = theta.copy()
    for _ in range(MAX_PROJECTION):
        c = constraint.exact(th)
        if abs(c) <= tol:
            return th, abs(c)
        _, J = prob.data_residuals(th[None])
        A = J[0].T @ J[0]
        A += 1e-10 * max(np.trace(A), 1.0) / A.shape[0] * np.eye(A.shape[0])
        _, dc = constraint(th[None])
        dc = dc[0]
        try:
            v = np.linalg.solve(A, dc)
        except np.linalg.LinAlgError:
            v = dc
        den = dc @ v
        if not np.isfinite(den) or den <= 0:
            break
        th = np.clip(th - c * v / den, prob.lower, prob.upper)
    c = constraint.exact(th)
    return th, abs(c)


class _HardSupConstraint(_SoftSupConstraint):
    """Exact maximal deviation with the gradient at the global argmax."""

    def __init__(self, prob: _Problem, region, eps: float):
        super().__init__(prob, region, eps, np.inf)
        self.grid = np.linspace(region[0], region[1], GRID_N)

    def __call__(self, theta):
        p = self.prob
        b1, b2 = p.split(np.atleast_2d(theta))
        x = self.grid
        a = np.abs(p.spec1.values(x, b1) - p.spec2.values(x, b2))
        j = a.argmax(axis=1)
        # parabolic vertex through the grid maximum and its neighbours; the
        # exact constraint used for the final feasibility check is unaffected
        rows = np.arange(j.size)
        jm, jp = np.maximum(j - 1, 0), np.minimum(j + 1, x.size - 1)
        am, a0, ap = a[rows, jm], a[rows, j], a[rows, jp]
        curv = am - 2.0 * a0 + ap
        interior = (j > 0) & (j < x.size - 1) & (curv < 0)
        step = np.where(interior, 0.5 * (am - ap) / np.where(interior, curv, -1.0), 0.0)
        x0 = x[j] + step * (x[1] - x[0])
        d0 = p.spec1.values_paired(x0, b1) - p.spec2.values_paired(x0, b2)
        better = np.abs(d0) > a0
        x0 = np.where(better, x0, x[j])
        val = np.where(better, np.abs(d0), a0)
        sign = np.sign(p.spec1.values_paired(x0, b1) - p.spec2.values_paired(x0, b2))
        sign[sign == 0] = 1.0
        # row i needs the gradient at its own x0[i]: the diagonal of the (q, q, p) block
        g1 = np.einsum("iip->ip", p.spec1.gradients(x0, b1))
        g2 = np.einsum("iip->ip", p.spec2.gradients(x0, b2))
        return val - self.eps, sign[:, None] * np.concatenate([g1, -g2], axis=-1)


def _branch_starts(prob: _Problem, fit1_beta, fit2_beta, region, kappa: float) -> np.ndarray:
    """Unperturbed warm start plus two starts shifted toward +/- kappa difference."""
    base = np.concatenate([fit1_beta, fit2_beta])
    x = np.linspace(region[0], region[1], 33)
    G1 = prob.spec1.gradients(x, fit1_beta)
    G2 = prob.spec2.gradients(x, fit2_beta)
    d1 = np.linalg.lstsq(G1, np.full(x.size, 0.5 * kappa), rcond=None)[0]
    d2 = np.linalg.lstsq(G2, np.full(x.size, -0.5 * kappa), rcond=None)[0]
    shift = np.concatenate([d1, d2])
    starts = np.stack([base, base + shift, base - shift])
    return np.clip(starts, prob.lower, prob.upper)


def fit_constrained(
    spec1: ModelSpec,
    spec2: ModelSpec,
    s1: GroupSample,
    s2: GroupSample,
    eps: float,
    distance: Distance | str,
    starts=None,
    region=None,
    fits: tuple[FitResult, FitResult] | None = None,
) -> ConstrainedFit:
    """Minimise the pooled SSR of both groups subject to ``d(beta1, beta2) = eps``.

    Parameters
    ----------
    starts : sequence of (beta1, beta2) pairs, optional
        Extra start points, tried in addition to the unconstrained warm start
        and its two branch perturbations.
    region : (lo, hi), optional
        Covariate interval; defaults to the region of ``s1``.
    fits : pair of FitResult, optional
        Unconstrained fits to warm-start from; computed when absent.

    Raises
    ------
    ConstraintInfeasible
        The penalty reached its cap with the constraint still violated.
    NonConvergence
        No start produced a feasible point for another reason.
    """
    distance = Distance.parse(distance)
    if not eps > 0:
        raise ConstraintInfeasible(f"eps must be positive, got {eps}")
    region = s1.region if region is None else (float(region[0]), float(region[1]))
    if fits is None:
        fits = (fit_ols(spec1, s1, check_information=False),
                fit_ols(spec2, s2, check_information=False))
    prob = _Problem(spec1, spec2, s1, s2)
    tol = feasibility_tol(eps)
    width = region[1] - region[0]
    kappa = np.sqrt(eps / width) if distance is Distance.L2SQ else eps
    theta0 = _branch_starts(prob, fits[0].beta_hat, fits[1].beta_hat, region, kappa)
    if starts is not None:
        extra = [np.concatenate([np.asarray(a, float), np.asarray(b, float)]) for a, b in starts]
        theta0 = np.concatenate([theta0, np.clip(np.array(extra), prob.lower, prob.upper)])

    if distance is Distance.L2SQ:
        con = _L2Constraint(prob, gauss_legendre(region), eps)
        theta, _, capped = _alm(prob, con, theta0, tol)
        final = [(th, abs(con.exact(th))) for th in theta]
    else:
        theta = theta0
        capped = np.zeros(theta.shape[0], bool)
        for temp in SOFT_TEMPERATURES:
            con = _SoftSupConstraint(prob, region, eps, temp)
            # the soft maximum only approximates the true one; a loose
            # tolerance suffices before the exact projection
            theta, _, capped = _alm(prob, con, theta, max(tol, 1e-3 / temp))
        # polish on the exact maximum, then project onto the grid-refined constraint
        hard = _HardSupConstraint(prob, region, eps)
        theta, _, capped = _alm(prob, hard, theta, tol)
        final = [_project(prob, hard, th, tol) for th in theta]

    obj = prob.objective(np.array([th for th, _ in final]))
    feasible = np.array([res <= tol for _, res in final])
    if not feasible.any():
        best_res = min(res for _, res in final)
        if capped.all():
            raise ConstraintInfeasible(
                f"no parameters with {distance.value} distance {eps} found "
                f"(smallest constraint residual {best_res:.3g})"
            )
        raise NonConvergence(f"constrained fit did not reach feasibility (residual {best_res:.3g})")
    cand = np.flatnonzero(feasible)
    best = obj[cand].min()
    ties = [i for i in cand if obj[i] <= best + TIE_SSR]
    pick = min(ties, key=lambda i: tuple(final[i][0]))
    th, res = final[pick]
    b1, b2 = prob.split(th)
    return ConstrainedFit(b1.copy(), b2.copy(), float(res), float(obj[pick]), True, True,
                          distance, float(eps), int(theta0.shape[0]))


def select_null_params(pf: PairedFit, eps: float, distance: Distance | str,
                       cf: ConstrainedFit | None, d_hat: float | None = None):
    """Parameters used to generate bootstrap data under the null hypothesis.

    The unconstrained estimates are kept when the observed distance already
    lies in the null (``d_hat >= eps``); otherwise the constrained fit is used.
    """
    distance = Distance.parse(distance)
    if d_hat is None:
        from .metrics import dist_l2sq, dist_sup

        d_hat = dist_l2sq(pf) if distance is Distance.L2SQ else dist_sup(pf).value
    if d_hat >= eps:
        return pf.beta1, pf.beta2
    if cf is None:
        raise ValueError("a constrained fit is required when d_hat < eps")
    return cf.beta1_tilde, cf.beta2_tilde
