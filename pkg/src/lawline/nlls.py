"""Bounded, multi-start Levenberg-Marquardt least squares.

Minimizes ``sum((y - model(p, x))**2)`` subject to box bounds on ``p``. Each start is
refined with damped Gauss-Newton steps (Marquardt diagonal scaling); steps are projected
onto the box and only accepted when the sum of squares drops. The best start wins, with
exact ties broken by the lexicographically smaller parameter vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from lawline.core import InvalidArgumentError, LawlineError

Model = Callable[[np.ndarray, np.ndarray], np.ndarray]
Jacobian = Callable[[np.ndarray, np.ndarray], np.ndarray]

MAX_ITER = 500
FTOL = 1e-10
GTOL = 1e-12
# gradient test applied when a run stops on the relative-improvement criterion
LOOSE_GTOL = 1e-6
# residual norm below this fraction of |y| counts as an exact fit
EXACT_RTOL = 1e-13


class ConvergenceError(LawlineError, RuntimeError):
    pass


class UnderdeterminedError(LawlineError, ValueError):
    pass


@dataclass(frozen=True)
class FitDiagnostics:
    iterations: int
    converged: bool
    sse: float
    n_starts_tried: int
    best_start_index: int
    grad_cosine: float = 0.0
    stop_reason: str = ""

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "sse": self.sse,
            "n_starts_tried": self.n_starts_tried,
            "best_start_index": self.best_start_index,
            "grad_cosine": self.grad_cosine,
            "stop_reason": self.stop_reason,
        }


@dataclass(frozen=True)
class _Run:
    params: np.ndarray
    sse: float
    iterations: int
    converged: bool
    grad_cosine: float
    stop_reason: str


def finite_difference_jacobian(model: Model, params: np.ndarray, x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``model`` with respect to ``params``."""
    params = np.asarray(params, dtype=float)
    cols = []
    for j in range(params.size):
        h = rel_step * max(abs(params[j]), 1.0)
        up = params.copy()
        dn = params.copy()
        up[j] += h
        dn[j] -= h
        cols.append((np.asarray(model(up, x), dtype=float) - np.asarray(model(dn, x), dtype=float)) / (2 * h))
    return np.stack(cols, axis=1)


def _sse(r: np.ndarray) -> float:
    return float(np.dot(r, r))


def _gradient_cosine(J: np.ndarray, r: np.ndarray, free: np.ndarray) -> float:
    """Largest |cos| between the residual vector and a free Jacobian column (MINPACK's gtol test)."""
    rnorm = math.sqrt(_sse(r))
    if rnorm == 0.0 or not free.any():
        return 0.0
    g = J.T @ r
    cnorm = np.sqrt(np.einsum("ij,ij->j", J, J))
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(cnorm > 0, np.abs(g) / (cnorm * rnorm), 0.0)
    return float(np.max(cos[free]))


def _free_mask(p: np.ndarray, g: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    # g = J^T r points downhill in parameter space
    at_lo = (p <= lo) & (g < 0)
    at_hi = (p >= hi) & (g > 0)
    return ~(at_lo | at_hi)


def _refine(
    model: Model,
    jac: Jacobian,
    x: np.ndarray,
    y: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    start: np.ndarray,
    max_iter: int,
    ftol: float,
    gtol: float,
) -> Optional[_Run]:
    p = np.clip(start, lo, hi)
    with np.errstate(all="ignore"):
        r = y - model(p, x)
    if not np.all(np.isfinite(r)):
        return None
    sse = _sse(r)
    exact = (EXACT_RTOL * float(np.linalg.norm(y))) ** 2
    lam = 1e-3
    last_rel = math.inf
    cos = math.inf
    it = 0
    stop = "max_iter"
    converged = False
    while True:
        with np.errstate(all="ignore"):
            J = np.asarray(jac(p, x), dtype=float)
        if not np.all(np.isfinite(J)):
            stop = "non_finite_jacobian"
            break
        g = J.T @ r
        free = _free_mask(p, g, lo, hi)
        cos = _gradient_cosine(J, r, free)
        if sse <= exact:
            converged, stop = True, "exact_fit"
            break
        if cos <= gtol:
            converged, stop = True, "gtol"
            break
        if last_rel < ftol:
            converged, stop = cos <= LOOSE_GTOL, "ftol"
            break
        if it >= max_iter:
            break
        it += 1
        A = np.einsum("ij,ik->jk", J[:, free], J[:, free])
        scale = np.maximum(np.diag(A).copy(), 1e-300)
        gf = g[free]
        accepted = False
        while lam <= 1e16:
            try:
                step = np.linalg.solve(A + lam * np.diag(scale), gf)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = p.copy()
            trial[free] += step
            trial = np.clip(trial, lo, hi)
            with np.errstate(all="ignore"):
                r_new = y - model(trial, x)
            sse_new = _sse(r_new) if np.all(np.isfinite(r_new)) else math.inf
            if sse_new < sse:
                last_rel = (sse - sse_new) / sse
                p, r, sse = trial, r_new, sse_new
                lam = max(lam * 0.1, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # no descent direction left at machine precision
            converged, stop = cos <= LOOSE_GTOL, "stalled"
            break
    return _Run(p, sse, it, converged, cos, stop)


def nlls_fit(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    bounds: Sequence[tuple[float, float]],
    starts: Sequence[Sequence[float]],
    jac: Optional[Jacobian] = None,
    max_iter: int = MAX_ITER,
    ftol: float = FTOL,
    gtol: float = GTOL,
) -> tuple[np.ndarray, FitDiagnostics]:
    """Fit ``model`` to ``(x, y)`` by bounded least squares from several starts.

    Args:
        model: ``model(params, x) -> predictions`` (same length as ``y``).
        x: Inputs, passed through to ``model`` untouched.
        y: Targets.
        bounds: One ``(lo, hi)`` pair per parameter.
        starts: Initial parameter vectors. Starts outside the bounds are skipped.
        jac: Optional analytic Jacobian of the predictions, shape ``(len(y), n_params)``.
            Central differences are used when omitted.

    Returns:
        Best parameter vector and its diagnostics.

    Raises:
        UnderdeterminedError: fewer than ``n_params + 1`` data points.
        ConvergenceError: every start produced non-finite residuals.
    """
    y = np.asarray(y, dtype=float)
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    if np.any(~(lo < hi)):
        raise InvalidArgumentError("every bound must satisfy lo < hi")
    n_params = lo.size
    if y.size < n_params + 1:
        raise UnderdeterminedError(f"{y.size} data points cannot determine {n_params} parameters")
    if not np.all(np.isfinite(y)):
        raise InvalidArgumentError("targets must be finite")
    if jac is None:
        jac = lambda p, xx: finite_difference_jacobian(model, p, xx)  # noqa: E731

    best: Optional[_Run] = None
    best_index = -1
    tried = 0
    for index, start in enumerate(starts):
        start = np.asarray(start, dtype=float)
        if start.shape != lo.shape:
            raise InvalidArgumentError(f"start {index} has {start.size} entries, expected {n_params}")
        if np.any(start < lo) or np.any(start > hi) or not np.all(np.isfinite(start)):
            continue
        tried += 1
        run = _refine(model, jac, x, y, lo, hi, start, max_iter, ftol, gtol)
        if run is None:
            continue
        if best is None or run.sse < best.sse or (
            run.sse == best.sse and tuple(run.params) < tuple(best.params)
        ):
            best, best_index = run, index
    if tried == 0:
        raise InvalidArgumentError("no start lies inside the bounds")
    if best is None:
        raise ConvergenceError("residuals were non-finite at every start")
    return best.params, FitDiagnostics(
        best.iterations, best.converged, best.sse, tried, best_index, best.grad_cosine, best.stop_reason
    )
