"""Batched, box-projected Levenberg-Marquardt.

One call minimises ``sum(r(theta)**2)`` independently for every row of a
``(m, P)`` batch of starting points.  Each row carries its own damping and
stops on its own criteria; converged rows are frozen, so a row's result does
not depend on which other rows share the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

ResidualFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]

GTOL = 1e-8
XTOL = 1e-12
MAX_ITER = 200


@dataclass
class LMResult:
    theta: np.ndarray      # (m, P)
    cost: np.ndarray       # (m,) sum of squared residuals at theta
    converged: np.ndarray  # (m,) bool
    n_iter: np.ndarray     # (m,) accepted + rejected iterations


def _normal_equations(J: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Jt = J.transpose(0, 2, 1)
    g = np.matmul(Jt, r[:, :, None])[:, :, 0]
    A = np.matmul(Jt, J)
    return A, g


def _damped_step(A, g, mu, blocked):
    P = A.shape[-1]
    d = np.diagonal(A, axis1=1, axis2=2).copy()
    floor = 1e-12 * np.maximum(d.max(axis=1, keepdims=True), 1e-300)
    d = np.maximum(d, floor)
    M = A.copy()
    diag = np.einsum("mii->mi", M)
    diag += mu[:, None] * d
    rhs = -g.copy()
    if blocked.any():
        M = np.where(blocked[:, :, None] | blocked[:, None, :], 0.0, M)
        M = M + blocked[:, :, None] * np.eye(P)
        rhs = np.where(blocked, 0.0, rhs)
    with np.errstate(all="ignore"):
        try:
            step = np.linalg.solve(M, rhs[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            step = np.stack([_safe_solve(Mi, bi) for Mi, bi in zip(M, rhs)])
    return step


def _safe_solve(M, b):
    try:
        return np.linalg.solve(M, b)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(M, b, rcond=None)[0]


def levenberg_marquardt(
    fun: ResidualFn,
    theta0: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    offset=0.0,
    max_iter: int = MAX_ITER,
    gtol: float = GTOL,
    xtol: float = XTOL,
) -> LMResult:
    """Minimise ``sum(r**2)`` row-wise over the box ``[lower, upper]``.

    ``fun(theta, rows)`` maps a ``(q, P)`` batch to residuals ``(q, K)`` and
    their Jacobian ``(q, K, P)``; ``rows`` holds the batch indices of the
    ``q`` points so row-specific data can be looked up.

    Convergence: the projected gradient of ``cost + offset`` is below ``gtol * max(1, cost + offset)`` in max-norm,
    or a step (accepted or proposed) shrinks below ``xtol * (1 + |theta|)``.
    """
    theta = np.clip(np.array(theta0, dtype=float, ndmin=2), lower, upper)
    m, P = theta.shape
    offset = np.broadcast_to(np.asarray(offset, float), (m,))
    r, J = fun(theta, np.arange(m))
    with np.errstate(all="ignore"):
        cost = (r * r).sum(axis=1)
    ok = np.isfinite(cost) & np.all(np.isfinite(J), axis=(1, 2))
    cost = np.where(ok, cost, np.inf)
    mu = np.full(m, 1e-3)
    nu = np.full(m, 2.0)
    done = ~ok
    converged = np.zeros(m, bool)
    n_iter = np.zeros(m, np.int64)

    for _ in range(max_iter):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        th, rr, JJ = theta[idx], r[idx], J[idx]
        A, g = _normal_equations(JJ, rr)
        grad = 2.0 * g
        at_lo = th <= lower
        at_hi = th >= upper
        pg = np.where((at_lo & (grad > 0)) | (at_hi & (grad < 0)), 0.0, grad)
        scale = np.maximum(1.0, cost[idx] + offset[idx])
        small_grad = np.abs(pg).max(axis=1) < gtol * scale
        if small_grad.any():
            converged[idx[small_grad]] = True
            done[idx[small_grad]] = True
            keep = ~small_grad
            idx, th, A, g = idx[keep], th[keep], A[keep], g[keep]
            at_lo, at_hi = at_lo[keep], at_hi[keep]
            if idx.size == 0:
                continue
        n_iter[idx] += 1
        mu_i = mu[idx]
        step = _damped_step(A, g, mu_i, np.zeros_like(at_lo))
        blocked = (at_lo & (step < 0)) | (at_hi & (step > 0))
        if blocked.any():
            step = _damped_step(A, g, mu_i, blocked)
        trial = np.clip(th + step, lower, upper)
        actual = trial - th
        bad = ~np.all(np.isfinite(actual), axis=1)
        tiny = ~bad & (np.abs(actual).max(axis=1) <= xtol * (1.0 + np.abs(th).max(axis=1)))
        r_new, J_new = fun(trial, idx)
        with np.errstate(all="ignore"):
            c_new = (r_new * r_new).sum(axis=1)
        finite = np.isfinite(c_new) & np.all(np.isfinite(J_new), axis=(1, 2))
        with np.errstate(all="ignore"):
            # predicted decrease of the Gauss-Newton model |r + J s|^2
            As = np.matmul(A, actual[:, :, None])[:, :, 0]
            pred = -(2.0 * (g * actual).sum(axis=1) + (actual * As).sum(axis=1))
            rho = (cost[idx] - c_new) / pred
        accept = finite & (c_new < cost[idx]) & ~tiny & ~bad

        a = idx[accept]
        theta[a] = trial[accept]
        r[a] = r_new[accept]
        J[a] = J_new[accept]
        cost[a] = c_new[accept]
        # gain-ratio damping update (Nielsen): shrink more when the model predicts well
        rho_a = np.where(np.isfinite(rho[accept]) & (pred[accept] > 0), rho[accept], 0.0)
        factor = np.maximum(1.0 / 3.0, 1.0 - (2.0 * np.clip(rho_a, 0.0, 1.0) - 1.0) ** 3)
        mu[a] = np.maximum(mu_i[accept] * factor, 1e-15)
        nu[a] = 2.0
        rej = idx[~accept]
        mu[rej] = np.minimum(mu_i[~accept] * nu[rej], 1e30)
        nu[rej] = np.minimum(nu[rej] * 2.0, 1e6)
        # a vanishing step, taken or not, means no further decrease is available
        stop = idx[tiny]
        converged[stop] = True
        done[stop] = True
        done[idx[bad]] = True
        stuck = idx[~accept & ~bad & (mu[idx] >= 1e30)]
        converged[stuck] = True
        done[stuck] = True

    return LMResult(theta, cost, converged, n_iter)
