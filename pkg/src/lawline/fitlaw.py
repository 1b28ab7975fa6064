"""Compute-to-loss and loss-to-loss scaling-law fitting.

Compute-to-loss::

    L(N, D) = E + ((A / N) ** (alpha / beta) + B / D) ** beta

Loss-to-loss (shifted power law)::

    L_y = K * (L_x - E_x) ** kappa + E_y

A loss-to-loss fit is two-staged: the irreducible errors ``E_x`` and ``E_y`` come from
separate compute-to-loss fits on the x and y datasets (or from the minimum observed loss
when the checkpoints do not vary in both N and D), and only ``K`` and ``kappa`` are fit
afterwards with the floors held fixed.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from lawline.core import (
    CheckpointRecord,
    ConfigId,
    InvalidArgumentError,
    LawlineError,
    LossUnit,
    MissingDataError,
    UnitMismatchError,
)
from lawline.ingest import ConfigGroup
from lawline.nlls import ConvergenceError, FitDiagnostics, UnderdeterminedError, nlls_fit

# bounds (public parameterization)
COEF_MAX = 1e12
EXPONENT_MAX = 2.0
K_MAX = 1e6
KAPPA_MAX = 10.0
# open lower ends of the (0, x] intervals
POSITIVE_FLOOR = 1e-12
EXPONENT_FLOOR = 1e-6

BASE_CLAMP = 1e-9  # keeps (L_x - E_x) ** kappa differentiable at the shift
CLIP_EPS = 1e-6  # tolerated overshoot of a supplied floor above the smallest loss

C2L_MIN_POINTS = 6
L2L_MIN_POINTS = 3

E_START_FRACTIONS = (0.0, 0.5, 0.9)
EXPONENT_STARTS = (0.2, 0.35, 0.5)
KAPPA_STARTS = (0.5, 1.0, 1.5, 2.0)


class FallbackRequired(LawlineError, ValueError):
    """The checkpoints do not vary in both N and D; use the minimum-loss floor instead."""


class DegenerateFitError(ConvergenceError):
    pass


@dataclass(frozen=True)
class ComputeToLossLaw:
    eval_dataset: str
    config: ConfigId
    e_irreducible: float
    a_coef: Optional[float] = None
    b_coef: Optional[float] = None
    alpha: Optional[float] = None
    beta: Optional[float] = None
    fallback_used: bool = False
    sse: float = 0.0
    unit: LossUnit = LossUnit.NATS_PER_TOKEN
    n_points: int = 0
    diagnostics: Optional[FitDiagnostics] = None

    @property
    def law_id(self) -> str:
        return f"c2l:{self.config.label}:{self.eval_dataset}"

    def predict(self, params_n, tokens_d) -> np.ndarray | float:
        """Loss at ``(N, D)``; scalars in, scalar out."""
        if self.fallback_used:
            raise InvalidArgumentError(
                f"{self.law_id} is a minimum-loss floor estimate and cannot predict at (N, D)"
            )
        n = np.asarray(params_n, dtype=float)
        d = np.asarray(tokens_d, dtype=float)
        out = _c2l_predict(self.internal_params(), np.log(n), np.log(d))
        return float(out) if out.ndim == 0 else out

    def internal_params(self) -> np.ndarray:
        return np.array(
            [self.e_irreducible, math.log(self.a_coef), math.log(self.b_coef), self.alpha, self.beta]
        )

    def to_dict(self) -> dict:
        return {
            "kind": "compute_to_loss",
            "law_id": self.law_id,
            "eval_dataset": self.eval_dataset,
            "config": self.config.to_dict(),
            "unit": self.unit.value,
            "e_irreducible": self.e_irreducible,
            "a_coef": self.a_coef,
            "b_coef": self.b_coef,
            "alpha": self.alpha,
            "beta": self.beta,
            "fallback_used": self.fallback_used,
            "sse": self.sse,
            "n_points": self.n_points,
            "diagnostics": None if self.diagnostics is None else self.diagnostics.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ComputeToLossLaw":
        diag = data.get("diagnostics")
        return cls(
            data["eval_dataset"],
            ConfigId.from_dict(data["config"]),
            float(data["e_irreducible"]),
            data.get("a_coef"),
            data.get("b_coef"),
            data.get("alpha"),
            data.get("beta"),
            bool(data.get("fallback_used", False)),
            float(data.get("sse", 0.0)),
            LossUnit.parse(data.get("unit", "nats")),
            int(data.get("n_points", 0)),
            None if diag is None else FitDiagnostics(**diag),
        )


@dataclass(frozen=True)
class LossToLossLaw:
    x_dataset: str
    y_dataset: str
    config: ConfigId
    k_coef: float
    kappa: float
    e_x: float
    e_y: float
    r_squared: float = math.nan
    n_points: int = 0
    unit: LossUnit = LossUnit.NATS_PER_TOKEN
    diagnostics: Optional[FitDiagnostics] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not (self.k_coef > 0 and self.kappa > 0):
            raise InvalidArgumentError("K and kappa must be positive")

    @property
    def law_id(self) -> str:
        return f"l2l:{self.config.label}:{self.x_dataset}->{self.y_dataset}"

    def predict(self, l_x):
        return predict_y(self, l_x)

    def to_dict(self) -> dict:
        return {
            "kind": "loss_to_loss",
            "law_id": self.law_id,
            "x_dataset": self.x_dataset,
            "y_dataset": self.y_dataset,
            "config": self.config.to_dict(),
            "unit": self.unit.value,
            "k_coef": self.k_coef,
            "kappa": self.kappa,
            "e_x": self.e_x,
            "e_y": self.e_y,
            "r_squared": self.r_squared,
            "n_points": self.n_points,
            "diagnostics": None if self.diagnostics is None else self.diagnostics.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LossToLossLaw":
        diag = data.get("diagnostics")
        return cls(
            data["x_dataset"],
            data["y_dataset"],
            ConfigId.from_dict(data["config"]),
            float(data["k_coef"]),
            float(data["kappa"]),
            float(data["e_x"]),
            float(data["e_y"]),
            float(data.get("r_squared", math.nan)),
            int(data.get("n_points", 0)),
            LossUnit.parse(data.get("unit", "nats")),
            None if diag is None else FitDiagnostics(**diag),
        )


def law_from_dict(data: dict) -> ComputeToLossLaw | LossToLossLaw:
    kind = data.get("kind")
    if kind == "compute_to_loss":
        return ComputeToLossLaw.from_dict(data)
    if kind == "loss_to_loss":
        return LossToLossLaw.from_dict(data)
    raise InvalidArgumentError(f"unknown law kind {kind!r}")


# --- compute-to-loss model in internal coordinates (E, log A, log B, alpha, beta) ---


def _c2l_terms(theta: np.ndarray, log_n: np.ndarray, log_d: np.ndarray):
    e, log_a, log_b, alpha, beta = theta
    log_ratio = log_a - log_n
    a = np.exp((alpha / beta) * log_ratio)
    b = np.exp(log_b - log_d)
    s = a + b
    log_s = np.log(s)
    power = np.exp(beta * log_s)
    return e, alpha, beta, log_ratio, a, b, s, log_s, power


def _c2l_predict(theta: np.ndarray, log_n: np.ndarray, log_d: np.ndarray) -> np.ndarray:
    e, *_, power = _c2l_terms(theta, log_n, log_d)
    return e + power


def _c2l_model(theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    return _c2l_predict(theta, x[0], x[1])


def _c2l_jacobian(theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    e, alpha, beta, log_ratio, a, b, s, log_s, power = _c2l_terms(theta, x[0], x[1])
    inner = power / s  # s ** (beta - 1)
    return np.stack(
        [
            np.ones_like(power),
            alpha * inner * a,
            beta * inner * b,
            inner * a * log_ratio,
            power * log_s - inner * a * (alpha / beta) * log_ratio,
        ],
        axis=1,
    )


# --- loss-to-loss model in internal coordinates (log K, kappa) ---


def _l2l_model_factory(e_x: float, e_y: float):
    def model(theta: np.ndarray, lx: np.ndarray) -> np.ndarray:
        base = np.maximum(lx - e_x, BASE_CLAMP)
        return e_y + np.exp(theta[0] + theta[1] * np.log(base))

    def jac(theta: np.ndarray, lx: np.ndarray) -> np.ndarray:
        log_base = np.log(np.maximum(lx - e_x, BASE_CLAMP))
        term = np.exp(theta[0] + theta[1] * log_base)
        return np.stack([term, term * log_base], axis=1)

    return model, jac


def _check_unit(records: Sequence[CheckpointRecord], datasets: Iterable[str]) -> LossUnit:
    units = {r.losses[d].unit for r in records for d in datasets if d in r.losses}
    if len(units) > 1:
        raise UnitMismatchError(f"cannot fit across mixed loss units {sorted(u.value for u in units)}")
    return units.pop() if units else LossUnit.NATS_PER_TOKEN


def _records(group: ConfigGroup | Sequence[CheckpointRecord]) -> tuple[Optional[ConfigId], list[CheckpointRecord]]:
    if isinstance(group, ConfigGroup):
        return group.config, list(group.records)
    records = list(group)
    configs = {r.config for r in records}
    if len(configs) > 1:
        raise InvalidArgumentError("records span several configurations; group them first")
    return (configs.pop() if configs else None), records


def c2l_starts(log_n: np.ndarray, log_d: np.ndarray, losses: np.ndarray) -> list[np.ndarray]:
    """Deterministic start grid in internal coordinates.

    For each (E, alpha, beta) on the grid, A and B come from solving the linearized law
    ``(L - E) ** (1 / beta) = A ** (alpha / beta) * N ** (-alpha / beta) + B / D`` at two
    extreme checkpoints: smallest N (largest D among those) and largest N (smallest D).
    """
    min_loss = float(losses.min())
    i1 = min(range(losses.size), key=lambda i: (log_n[i], -log_d[i]))
    i2 = min(range(losses.size), key=lambda i: (-log_n[i], log_d[i]))
    log_lo, log_hi = math.log(POSITIVE_FLOOR), math.log(COEF_MAX)
    starts = []
    for frac, alpha, beta in itertools.product(E_START_FRACTIONS, EXPONENT_STARTS, EXPONENT_STARTS):
        e = frac * min_loss
        rhs = np.maximum(losses[[i1, i2]] - e, 1e-12) ** (1.0 / beta)
        ratio = alpha / beta
        mat = np.array(
            [
                [math.exp(-ratio * log_n[i1]), math.exp(-log_d[i1])],
                [math.exp(-ratio * log_n[i2]), math.exp(-log_d[i2])],
            ]
        )
        try:
            u, v = np.linalg.solve(mat, rhs)
        except np.linalg.LinAlgError:
            u = v = -1.0
        if not (u > 0 and v > 0 and math.isfinite(u) and math.isfinite(v)):
            # split each extreme point's excess evenly between the two terms
            u = 0.5 * rhs[0] * math.exp(ratio * log_n[i1])
            v = 0.5 * rhs[1] * math.exp(log_d[i2])
        log_a = min(max(math.log(u) / ratio, log_lo), log_hi)
        log_b = min(max(math.log(v), log_lo), log_hi)
        starts.append(np.array([e, log_a, log_b, alpha, beta]))
    return starts


def fit_compute_to_loss(group: ConfigGroup | Sequence[CheckpointRecord], eval_dataset: str) -> ComputeToLossLaw:
    """Fit ``E, A, B, alpha, beta`` for one dataset on one configuration's checkpoints.

    Raises:
        MissingDataError: no record carries ``eval_dataset``.
        FallbackRequired: all checkpoints share N or share D.
        UnderdeterminedError: fewer than six usable checkpoints.
        DegenerateFitError: the loss does not vary at all.
    """
    config, records = _records(group)
    records = [r for r in records if eval_dataset in r.losses]
    if not records:
        raise MissingDataError(f"no record has a loss for {eval_dataset!r}")
    unit = _check_unit(records, [eval_dataset])
    n = np.array([r.params_n for r in records], dtype=float)
    d = np.array([r.tokens_d for r in records], dtype=float)
    losses = np.array([r.loss(eval_dataset) for r in records])
    # checked first: more points cannot help when N or D never varies
    if np.unique(n).size < 2 or np.unique(d).size < 2:
        raise FallbackRequired(
            f"checkpoints for {eval_dataset!r} do not vary in both N and D; use the minimum-loss floor"
        )
    if len(records) < C2L_MIN_POINTS:
        raise UnderdeterminedError(
            f"{len(records)} checkpoints for {eval_dataset!r}; a compute-to-loss fit needs {C2L_MIN_POINTS}"
        )
    if float(np.ptp(losses)) <= 1e-12 * max(1.0, float(np.abs(losses).max())):
        raise DegenerateFitError(f"loss on {eval_dataset!r} is constant; no scaling law to fit")

    log_n, log_d = np.log(n), np.log(d)
    min_loss = float(losses.min())
    log_lo, log_hi = math.log(POSITIVE_FLOOR), math.log(COEF_MAX)
    bounds = [
        (0.0, min_loss),
        (log_lo, log_hi),
        (log_lo, log_hi),
        (EXPONENT_FLOOR, EXPONENT_MAX),
        (EXPONENT_FLOOR, EXPONENT_MAX),
    ]
    theta, diag = nlls_fit(
        _c2l_model,
        np.stack([log_n, log_d]),
        losses,
        bounds,
        c2l_starts(log_n, log_d, losses),
        jac=_c2l_jacobian,
    )
    e, log_a, log_b, alpha, beta = (float(t) for t in theta)
    return ComputeToLossLaw(
        eval_dataset,
        config,
        e,
        math.exp(log_a),
        math.exp(log_b),
        alpha,
        beta,
        False,
        diag.sse,
        unit,
        len(records),
        diag,
    )


def estimate_irreducible_fallback(group: ConfigGroup | Sequence[CheckpointRecord], eval_dataset: str) -> float:
    """Minimum observed loss on ``eval_dataset``."""
    _, records = _records(group)
    values = [r.loss(eval_dataset) for r in records if eval_dataset in r.losses]
    if not values:
        raise MissingDataError(f"no record has a loss for {eval_dataset!r}")
    return min(values)


def fallback_law(group: ConfigGroup | Sequence[CheckpointRecord], eval_dataset: str) -> ComputeToLossLaw:
    config, records = _records(group)
    records = [r for r in records if eval_dataset in r.losses]
    unit = _check_unit(records, [eval_dataset])
    return ComputeToLossLaw(
        eval_dataset,
        config,
        estimate_irreducible_fallback(records, eval_dataset),
        fallback_used=True,
        unit=unit,
        n_points=len(records),
    )


def irreducible_law(group: ConfigGroup | Sequence[CheckpointRecord], eval_dataset: str) -> ComputeToLossLaw:
    """Stage one: a compute-to-loss fit, or the minimum-loss floor when N or D never varies."""
    try:
        return fit_compute_to_loss(group, eval_dataset)
    except FallbackRequired:
        return fallback_law(group, eval_dataset)


def r_squared(law: LossToLossLaw, points) -> float:
    """Coefficient of determination of ``law`` on ``(L_x, L_y)`` pairs."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] < 2:
        raise InvalidArgumentError("R^2 needs at least two points")
    lx, ly = pts[:, 0], pts[:, 1]
    centered = ly - ly.mean()
    ss_tot = float(np.dot(centered, centered))
    if ss_tot == 0.0:
        raise InvalidArgumentError("R^2 is undefined when L_y is constant")
    resid = ly - predict_y(law, lx)
    return 1.0 - float(np.dot(resid, resid)) / ss_tot


def predict_y(law: LossToLossLaw, l_x):
    """``K * max(l_x - E_x, 0) ** kappa + E_y``; scalars in, scalar out."""
    lx = np.asarray(l_x, dtype=float)
    out = law.e_y + law.k_coef * np.maximum(lx - law.e_x, 0.0) ** law.kappa
    return float(out) if out.ndim == 0 else out


def paired_losses(records: Iterable[CheckpointRecord], x_dataset: str, y_dataset: str) -> np.ndarray:
    pairs = [(r.loss(x_dataset), r.loss(y_dataset)) for r in records if x_dataset in r.losses and y_dataset in r.losses]
    return np.array(pairs, dtype=float).reshape(-1, 2)


def fit_loss_to_loss(
    group: ConfigGroup | Sequence[CheckpointRecord],
    x_dataset: str,
    y_dataset: str,
    e_x: float,
    e_y: float,
) -> LossToLossLaw:
    """Fit ``K`` and ``kappa`` with the floors ``e_x``/``e_y`` held fixed.

    Points sitting at or just below ``e_x`` are evaluated at a tiny positive base rather
    than rejected; a floor more than ``CLIP_EPS`` above the smallest observed loss is an
    error.
    """
    config, records = _records(group)
    pairs = [r for r in records if x_dataset in r.losses and y_dataset in r.losses]
    unit = _check_unit(pairs, [x_dataset, y_dataset])
    pts = paired_losses(pairs, x_dataset, y_dataset)
    if pts.shape[0] < L2L_MIN_POINTS:
        raise UnderdeterminedError(
            f"{pts.shape[0]} paired checkpoints for {x_dataset!r}->{y_dataset!r}; need {L2L_MIN_POINTS}"
        )
    lx, ly = pts[:, 0], pts[:, 1]
    if not (math.isfinite(e_x) and math.isfinite(e_y)) or e_x < 0 or e_y < 0:
        raise InvalidArgumentError("irreducible errors must be finite and >= 0")
    if e_x > lx.min() + CLIP_EPS or e_y > ly.min() + CLIP_EPS:
        raise InvalidArgumentError(
            f"supplied floors (E_x={e_x:.6g}, E_y={e_y:.6g}) exceed the smallest observed losses "
            f"({lx.min():.6g}, {ly.min():.6g})"
        )

    model, jac = _l2l_model_factory(e_x, e_y)
    i_top = int(np.argmax(lx))
    base_top = max(lx[i_top] - e_x, BASE_CLAMP)
    excess_top = ly[i_top] - e_y
    log_lo, log_hi = math.log(POSITIVE_FLOOR), math.log(K_MAX)
    starts = []
    for kappa in KAPPA_STARTS:
        log_k = math.log(excess_top) - kappa * math.log(base_top) if excess_top > 0 else 0.0
        starts.append(np.array([min(max(log_k, log_lo), log_hi), kappa]))
    theta, diag = nlls_fit(model, lx, ly, [(log_lo, log_hi), (EXPONENT_FLOOR, KAPPA_MAX)], starts, jac=jac)
    law = LossToLossLaw(
        x_dataset,
        y_dataset,
        config,
        math.exp(float(theta[0])),
        float(theta[1]),
        float(e_x),
        float(e_y),
        math.nan,
        int(pts.shape[0]),
        unit,
        diag,
    )
    try:
        r2 = r_squared(law, pts)
    except InvalidArgumentError:
        r2 = math.nan
    return replace(law, r_squared=r2)


@dataclass(frozen=True)
class TwoStageFit:
    x_law: ComputeToLossLaw
    y_law: ComputeToLossLaw
    l2l: LossToLossLaw


def fit_two_stage(group: ConfigGroup | Sequence[CheckpointRecord], x_dataset: str, y_dataset: str) -> TwoStageFit:
    """Floors from per-dataset compute-to-loss fits, then ``K, kappa`` with the floors fixed."""
    x_law = irreducible_law(group, x_dataset)
    y_law = irreducible_law(group, y_dataset)
    l2l = fit_loss_to_loss(group, x_dataset, y_dataset, x_law.e_irreducible, y_law.e_irreducible)
    return TwoStageFit(x_law, y_law, l2l)
