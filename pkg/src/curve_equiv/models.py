"""Parametric regression families m(x, b) with analytic gradients.

Every family evaluates in batch: ``b`` may carry leading batch dimensions
``(..., p)`` and ``x`` is a scalar or 1-D array of covariates, giving
responses of shape ``(..., k)`` and gradients of shape ``(..., k, p)``.
The bootstrap and the multi-start fitter depend on this to avoid Python
loops over replications.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionMismatch, DomainError, DuplicateId, ModelNotFound

EvalFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

# central-difference step factor for families registered without a gradient
FD_STEP = 1e-6


@dataclass(frozen=True)
class ModelSpec:
    """A regression family with its parameter box.

    Parameters
    ----------
    id : str
        Lowercase identifier used in configs and CLI flags.
    p : int
        Parameter dimension.
    eval_fn : callable
        ``eval_fn(x, b)`` with ``x`` of shape ``(k,)`` and ``b`` of shape
        ``(..., p)`` returning ``(..., k)``.
    grad_fn : callable or None
        Same signature, returning ``(..., k, p)``.  ``None`` selects the
        central finite-difference fallback.
    lower, upper : array_like
        Compact search box for the least-squares estimator.
    nonlinear : tuple of int or None
        Indices of parameters that enter nonlinearly.  The remaining ones are
        solved by linear least squares when building multi-start points.
        ``None`` treats every parameter as nonlinear.
    check_fn : callable or None
        ``check_fn(b)`` raising :class:`DomainError` for invalid parameters.
    """

    id: str
    p: int
    eval_fn: EvalFn
    grad_fn: EvalFn | None = None
    lower: np.ndarray = field(default=None)  # type: ignore[assignment]
    upper: np.ndarray = field(default=None)  # type: ignore[assignment]
    nonlinear: tuple[int, ...] | None = None
    check_fn: Callable[[np.ndarray], None] | None = None
    formula: str = ""
    broadcasting: bool = False

    def __post_init__(self):
        if self.p < 1:
            raise DimensionMismatch(f"model {self.id!r}: p must be positive")
        lo = np.full(self.p, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        hi = np.full(self.p, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if lo.shape != (self.p,) or hi.shape != (self.p,):
            raise DimensionMismatch(f"model {self.id!r}: box must have length {self.p}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise DomainError(f"model {self.id!r}: parameter box must be bounded")
        if np.any(lo >= hi):
            raise DomainError(f"model {self.id!r}: empty parameter box")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def analytic_gradient(self) -> bool:
        return self.grad_fn is not None

    @property
    def linear_indices(self) -> tuple[int, ...]:
        if self.nonlinear is None:
            return ()
        return tuple(j for j in range(self.p) if j not in self.nonlinear)

    # -- batch paths, no validation -------------------------------------
    def values(self, x, b) -> np.ndarray:
        return self.eval_fn(np.atleast_1d(np.asarray(x, float)), np.asarray(b, float))

    def values_paired(self, x: np.ndarray, b: np.ndarray) -> np.ndarray:
        """``m(x[i], b[i])`` for matching leading dimensions."""
        x = np.asarray(x, float)
        b = np.asarray(b, float)
        if self.broadcasting:
            return self.eval_fn(x[..., None], b)[..., 0]
        flat_x = x.reshape(-1)
        flat_b = b.reshape(-1, self.p)
        out = np.array([self.eval_fn(flat_x[i:i + 1], flat_b[i])[0] for i in range(flat_x.size)])
        return out.reshape(x.shape)

    def gradients(self, x, b) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, float))
        b = np.asarray(b, float)
        if self.grad_fn is not None:
            return self.grad_fn(x, b)
        return _central_difference(self.eval_fn, x, b)


def _central_difference(fn: EvalFn, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    p = b.shape[-1]
    out = np.empty(b.shape[:-1] + (x.shape[0], p))
    for j in range(p):
        h = FD_STEP * np.maximum(1.0, np.abs(b[..., j]))
        bp = b.copy()
        bm = b.copy()
        bp[..., j] += h
        bm[..., j] -= h
        out[..., j] = (fn(x, bp) - fn(x, bm)) / (2.0 * h[..., None])
    return out


def _check_b(spec: ModelSpec, b) -> np.ndarray:
    b = np.asarray(b, float)
    if b.ndim != 1 or b.shape[0] != spec.p:
        raise DimensionMismatch(
            f"model {spec.id!r} expects {spec.p} parameters, got shape {b.shape}"
        )
    if spec.check_fn is not None:
        spec.check_fn(b)
    return b


def eval_model(spec: ModelSpec, x, b):
    """Evaluate ``m(x, b)``; scalar ``x`` gives a float."""
    b = _check_b(spec, b)
    out = spec.values(x, b)
    return float(out[0]) if np.ndim(x) == 0 else out


def eval_gradient(spec: ModelSpec, x, b) -> np.ndarray:
    """Gradient of ``m`` with respect to ``b``.

    Returns shape ``(p,)`` for scalar ``x`` and ``(k, p)`` otherwise.  For
    families without an analytic gradient the central finite-difference
    approximation is returned; ``spec.analytic_gradient`` flags this.
    """
    b = _check_b(spec, b)
    out = spec.gradients(x, b)
    return out[0] if np.ndim(x) == 0 else out


# ---------------------------------------------------------------------------
# Built-in families
# ---------------------------------------------------------------------------

LIN_BOUND = 1e4


def _emax(x, b):
    return b[..., 0, None] + b[..., 1, None] * x / (b[..., 2, None] + x)


def _emax_grad(x, b):
    den = b[..., 2, None] + x
    g = np.empty(b.shape[:-1] + (x.shape[0], 3))
    g[..., 0] = 1.0
    g[..., 1] = x / den
    g[..., 2] = -b[..., 1, None] * x / den**2
    return g


def _emax_check(b):
    if not b[2] > 0:
        raise DomainError(f"emax requires b3 > 0, got {b[2]}")


def _exponential(x, b):
    return b[..., 0, None] + b[..., 1, None] * np.expm1(x / b[..., 2, None])


def _exponential_grad(x, b):
    b3 = b[..., 2, None]
    e = np.exp(x / b3)
    g = np.empty(b.shape[:-1] + (x.shape[0], 3))
    g[..., 0] = 1.0
    g[..., 1] = np.expm1(x / b3)
    g[..., 2] = -b[..., 1, None] * x * e / b3**2
    return g


def _exponential_check(b):
    if b[2] == 0:
        raise DomainError("exponential requires b3 != 0")


def _linear(x, b):
    return b[..., 0, None] + b[..., 1, None] * x


def _linear_grad(x, b):
    g = np.empty(b.shape[:-1] + (x.shape[0], 2))
    g[..., 0] = 1.0
    g[..., 1] = x
    return g


def _quadratic(x, b):
    return b[..., 0, None] * x**2 + b[..., 1, None] * x + b[..., 2, None]


def _quadratic_grad(x, b):
    g = np.empty(b.shape[:-1] + (x.shape[0], 3))
    g[..., 0] = x**2
    g[..., 1] = x
    g[..., 2] = 1.0
    return g


def _constant(x, b):
    return b[..., 0, None] + np.zeros_like(x)


def _constant_grad(x, b):
    return np.ones(b.shape[:-1] + (x.shape[0], 1))


EMAX = ModelSpec(
    "emax", 3, _emax, _emax_grad,
    lower=[-LIN_BOUND, -LIN_BOUND, 1e-3], upper=[LIN_BOUND, LIN_BOUND, 1e3],
    nonlinear=(2,), check_fn=_emax_check, formula="b1 + b2*x/(b3 + x)", broadcasting=True,
)
EXPONENTIAL = ModelSpec(
    "exponential", 3, _exponential, _exponential_grad,
    lower=[-LIN_BOUND, -LIN_BOUND, 0.25], upper=[LIN_BOUND, LIN_BOUND, 1e3],
    nonlinear=(2,), check_fn=_exponential_check, formula="b1 + b2*(exp(x/b3) - 1)", broadcasting=True,
)
LINEAR = ModelSpec(
    "linear", 2, _linear, _linear_grad,
    lower=[-LIN_BOUND] * 2, upper=[LIN_BOUND] * 2, nonlinear=(), formula="b1 + b2*x", broadcasting=True,
)
QUADRATIC = ModelSpec(
    "quadratic", 3, _quadratic, _quadratic_grad,
    lower=[-LIN_BOUND] * 3, upper=[LIN_BOUND] * 3, nonlinear=(),
    formula="b1*x^2 + b2*x + b3", broadcasting=True,
)
CONSTANT = ModelSpec(
    "constant", 1, _constant, _constant_grad,
    lower=[-LIN_BOUND], upper=[LIN_BOUND], nonlinear=(), formula="b1", broadcasting=True,
)

BUILTINS: tuple[ModelSpec, ...] = (EMAX, EXPONENTIAL, LINEAR, QUADRATIC, CONSTANT)

_registry: dict[str, ModelSpec] = {m.id: m for m in BUILTINS}
_lock = threading.Lock()


def builtin_registry() -> dict[str, ModelSpec]:
    """All known families (built-in plus user-registered), keyed by id."""
    with _lock:
        return dict(_registry)


def register_model(spec: ModelSpec) -> ModelSpec:
    with _lock:
        if spec.id in _registry:
            raise DuplicateId(f"model id {spec.id!r} already registered")
        _registry[spec.id] = spec
    return spec


def unregister_model(model_id: str) -> None:
    if model_id in {m.id for m in BUILTINS}:
        raise DomainError(f"cannot unregister built-in model {model_id!r}")
    with _lock:
        _registry.pop(model_id, None)


def get_model(model_id: str | ModelSpec) -> ModelSpec:
    if isinstance(model_id, ModelSpec):
        return model_id
    with _lock:
        try:
            return _registry[model_id]
        except KeyError:
            known = ", ".join(sorted(_registry))
            raise ModelNotFound(f"unknown model {model_id!r} (known: {known})") from None
