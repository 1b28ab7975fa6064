"""Intervention distances, law composition and report assembly."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from lawline.core import InvalidArgumentError, LawlineError, LossUnit, UnitMismatchError
from lawline.fitlaw import ComputeToLossLaw, LossToLossLaw, paired_losses, predict_y
from lawline.ingest import ConfigGroup

DEFAULT_INTERVAL = (0.0, 2.0)
AREA_TOL = 1e-8
_SCAN_POINTS = 512
_MAX_DEPTH = 60

CLAMP_NOTE = (
    "curves are extended left of their x-floor E_x as the constant E_y when integrating"
)
NOISE_NOTE = "synthetic checkpoint noise is independent across checkpoints and datasets"


class InvalidComparisonError(UnitMismatchError):
    pass


class InvalidCompositionError(LawlineError, ValueError):
    pass


def worker_count(default: Optional[int] = None) -> int:
    """Thread cap from ``LAWLINE_THREADS``; falls back to the CPU count."""
    raw = os.environ.get("LAWLINE_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise InvalidArgumentError(f"LAWLINE_THREADS must be an integer, got {raw!r}") from None
    return default or min(8, os.cpu_count() or 1)


def parallel_map(fn: Callable, items: Sequence, threads: Optional[int] = None) -> list:
    """``[fn(x) for x in items]``, fanned out over threads; result order is input order."""
    threads = worker_count() if threads is None else max(1, threads)
    if threads == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --- adaptive quadrature ---


def _simpson(f, a, fa, b, fb):
    m = 0.5 * (a + b)
    fm = f(m)
    return m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb)


def adaptive_simpson(f: Callable[[float], float], a: float, b: float, tol: float = AREA_TOL) -> float:
    """Integrate ``f`` over ``[a, b]`` by recursive Simpson bisection with Richardson correction."""
    if a == b:
        return 0.0
    fa, fb = f(a), f(b)
    m, fm, whole = _simpson(f, a, fa, b, fb)
    # explicit stack; panels are summed left to right for reproducibility
    total = 0.0
    stack = [(a, fa, b, fb, m, fm, whole, tol, 0)]
    while stack:
        a0, fa0, b0, fb0, m0, fm0, whole0, tol0, depth = stack.pop()
        lm, flm, left = _simpson(f, a0, fa0, m0, fm0)
        rm, frm, right = _simpson(f, m0, fm0, b0, fb0)
        delta = left + right - whole0
        if depth >= _MAX_DEPTH or abs(delta) <= 15.0 * tol0:
            total += left + right + delta / 15.0
        else:
            stack.append((m0, fm0, b0, fb0, rm, frm, right, tol0 / 2.0, depth + 1))
            stack.append((a0, fa0, m0, fm0, lm, flm, left, tol0 / 2.0, depth + 1))
    return total


def _check_comparable(law_a: LossToLossLaw, law_b: LossToLossLaw) -> None:
    if law_a.unit != law_b.unit:
        raise InvalidComparisonError(
            f"cannot compare a {law_a.unit.value} curve with a {law_b.unit.value} curve"
        )
    if (law_a.x_dataset, law_a.y_dataset) != (law_b.x_dataset, law_b.y_dataset):
        raise InvalidComparisonError(
            f"curves plot different axes: {law_a.x_dataset}->{law_a.y_dataset} "
            f"vs {law_b.x_dataset}->{law_b.y_dataset}"
        )


def _law_key(law: LossToLossLaw) -> tuple:
    return (law.e_x, law.e_y, law.k_coef, law.kappa)


def _breakpoints(law_a: LossToLossLaw, law_b: LossToLossLaw, lo: float, hi: float) -> list[float]:
    """Panel edges: interval ends, both kinks at E_x, and every sign change of y_a - y_b."""
    def diff(x: float) -> float:
        return predict_y(law_a, x) - predict_y(law_b, x)

    edges = {lo, hi}
    for e in (law_a.e_x, law_b.e_x):
        if lo < e < hi:
            edges.add(e)
    grid = sorted(edges | set(np.linspace(lo, hi, _SCAN_POINTS + 1).tolist()))
    roots = []
    values = [diff(x) for x in grid]
    for x0, x1, v0, v1 in zip(grid[:-1], grid[1:], values[:-1], values[1:]):
        if v0 == 0.0 or v1 == 0.0:
            continue
        if (v0 < 0) != (v1 < 0):
            roots.append(brentq(diff, x0, x1, xtol=1e-15, rtol=4 * np.finfo(float).eps))
    return sorted(edges | set(roots))


def area_between(
    law_a: LossToLossLaw,
    law_b: LossToLossLaw,
    interval: tuple[float, float] = DEFAULT_INTERVAL,
    tol: float = AREA_TOL,
) -> float:
    """L1 distance between two loss-to-loss curves on ``interval``.

    Both curves are evaluated with ``predict_y`` (flat at ``E_y`` left of ``E_x``). The
    interval is split at the curves' crossings and kinks so the absolute value never
    folds inside a quadrature panel.
    """
    lo, hi = float(interval[0]), float(interval[1])
    if not lo < hi:
        raise InvalidArgumentError(f"interval needs lo < hi, got {interval}")
    _check_comparable(law_a, law_b)
    # fixed argument order makes the result exactly symmetric
    if _law_key(law_b) < _law_key(law_a):
        law_a, law_b = law_b, law_a

    def gap(x: float) -> float:
        return abs(predict_y(law_a, x) - predict_y(law_b, x))

    edges = _breakpoints(law_a, law_b, lo, hi)
    per_panel = tol / max(1, len(edges) - 1)
    return math.fsum(adaptive_simpson(gap, a, b, per_panel) for a, b in zip(edges[:-1], edges[1:]))


@dataclass(frozen=True)
class InterventionMatrix:
    labels: tuple[str, ...]
    areas: tuple[tuple[float, ...], ...]
    interval: tuple[float, float]
    x_dataset: str
    y_dataset: str
    unit: LossUnit

    def as_array(self) -> np.ndarray:
        return np.array(self.areas, dtype=float).reshape(len(self.labels), len(self.labels))

    def entry(self, a: str, b: str) -> float:
        return self.areas[self.labels.index(a)][self.labels.index(b)]

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "areas": [list(row) for row in self.areas],
            "interval": list(self.interval),
            "x_dataset": self.x_dataset,
            "y_dataset": self.y_dataset,
            "unit": self.unit.value,
            "note": CLAMP_NOTE,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InterventionMatrix":
        return cls(
            tuple(data["labels"]),
            tuple(tuple(float(v) for v in row) for row in data["areas"]),
            (float(data["interval"][0]), float(data["interval"][1])),
            data["x_dataset"],
            data["y_dataset"],
            LossUnit.parse(data["unit"]),
        )


def intervention_matrix(
    laws: Sequence[tuple[str, LossToLossLaw]],
    interval: tuple[float, float] = DEFAULT_INTERVAL,
    threads: Optional[int] = None,
) -> InterventionMatrix:
    """Pairwise area-between-curves distances, labels kept in input order."""
    if len(laws) < 2:
        raise InvalidArgumentError("an intervention matrix needs at least two laws")
    labels = [name for name, _ in laws]
    if len(set(labels)) != len(labels):
        raise InvalidArgumentError("law names must be unique")
    first = laws[0][1]
    for _, law in laws[1:]:
        _check_comparable(first, law)
    n = len(laws)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    values = parallel_map(lambda ij: area_between(laws[ij[0]][1], laws[ij[1]][1], interval), pairs, threads)
    areas = [[0.0] * n for _ in range(n)]
    for (i, j), v in zip(pairs, values):
        areas[i][j] = areas[j][i] = v
    return InterventionMatrix(
        tuple(labels),
        tuple(tuple(row) for row in areas),
        (float(interval[0]), float(interval[1])),
        first.x_dataset,
        first.y_dataset,
        first.unit,
    )


@dataclass(frozen=True)
class DownstreamForecast:
    params_n: int
    tokens_d: int
    predicted_train_loss: float
    predicted_test_loss: float
    laws_used: tuple[str, str]

    def to_dict(self) -> dict:
        return {
            "params_n": self.params_n,
            "tokens_d": self.tokens_d,
            "predicted_train_loss": self.predicted_train_loss,
            "predicted_test_loss": self.predicted_test_loss,
            "laws_used": list(self.laws_used),
        }


def forecast_downstream(
    train_law: ComputeToLossLaw, l2l: LossToLossLaw, params_n: int, tokens_d: int
) -> DownstreamForecast:
    """Chain compute -> train loss -> test loss for a model with ``N`` params on ``D`` tokens."""
    if params_n < 1 or tokens_d < 1:
        raise InvalidArgumentError("params_n and tokens_d must be >= 1")
    if train_law.eval_dataset != l2l.x_dataset:
        raise InvalidCompositionError(
            f"compute law predicts {train_law.eval_dataset!r} but the loss-to-loss law reads {l2l.x_dataset!r}"
        )
    if train_law.config != l2l.config:
        raise InvalidCompositionError("laws were fitted on different configurations")
    if train_law.unit != l2l.unit:
        raise InvalidCompositionError("laws use different loss units")
    if train_law.fallback_used:
        raise InvalidCompositionError(f"{train_law.law_id} has no fitted compute dependence")
    train = float(train_law.predict(params_n, tokens_d))
    return DownstreamForecast(
        int(params_n), int(tokens_d), train, float(predict_y(l2l, train)), (train_law.law_id, l2l.law_id)
    )


# --- report ---


@dataclass(frozen=True)
class ReportOptions:
    interval: tuple[float, float] = DEFAULT_INTERVAL
    curve_points: int = 200
    subsample: Optional[int] = None
    seed: int = 0
    notes: tuple[str, ...] = (CLAMP_NOTE,)


@dataclass
class Report:
    compute_laws: list[dict] = field(default_factory=list)
    loss_laws: list[dict] = field(default_factory=list)
    matrices: list[dict] = field(default_factory=list)
    curves: list[dict] = field(default_factory=list)
    scatter: list[dict] = field(default_factory=list)
    scatter_only: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "compute_laws": self.compute_laws,
            "loss_laws": self.loss_laws,
            "matrices": self.matrices,
            "curves": self.curves,
            "scatter": self.scatter,
            "scatter_only": self.scatter_only,
            "notes": self.notes,
        }


def reservoir_indices(n: int, k: Optional[int], seed: int) -> list[int]:
    """Seeded reservoir sample of ``min(k, n)`` indices out of ``range(n)``, sorted."""
    if k is None or k >= n:
        return list(range(n))
    if k <= 0:
        return []
    rng = np.random.default_rng(seed)
    chosen = list(range(k))
    for i in range(k, n):
        j = int(rng.integers(0, i + 1))
        if j < k:
            chosen[j] = i
    return sorted(chosen)


def curve_samples(law: LossToLossLaw, lo: float, hi: float, points: int) -> list[tuple[float, float]]:
    xs = np.linspace(lo, hi, points)
    return [(float(x), float(y)) for x, y in zip(xs, predict_y(law, xs))]


def build_report(
    groups: Sequence[ConfigGroup],
    laws: Iterable[ComputeToLossLaw | LossToLossLaw],
    matrices: Iterable[InterventionMatrix] | InterventionMatrix | None = None,
    options: ReportOptions = ReportOptions(),
) -> Report:
    """Assemble parameter tables, R^2, matrices and plot samples into one report.

    Curves are sampled across the x range of their checkpoints when records are
    available, and across ``options.interval`` otherwise. Groups without a fitted
    loss-to-loss law are listed as scatter-only.
    """
    laws = list(laws)
    if isinstance(matrices, InterventionMatrix):
        matrices = [matrices]
    report = Report(notes=list(options.notes))
    report.compute_laws = [law.to_dict() for law in laws if isinstance(law, ComputeToLossLaw)]
    l2l = [law for law in laws if isinstance(law, LossToLossLaw)]
    report.loss_laws = [law.to_dict() for law in l2l]
    report.matrices = [m.to_dict() for m in (matrices or [])]

    by_config = {g.config: g for g in groups}
    fitted = set()
    for law in l2l:
        fitted.add(law.config)
        group = by_config.get(law.config)
        pts = paired_losses(group.records, law.x_dataset, law.y_dataset) if group else np.empty((0, 2))
        if pts.shape[0]:
            lo, hi = law.e_x, float(pts[:, 0].max())
            if hi <= lo:
                hi = lo + 1.0
        else:
            lo, hi = options.interval
        report.curves.append(
            {
                "law_id": law.law_id,
                "config": law.config.label,
                "x_dataset": law.x_dataset,
                "y_dataset": law.y_dataset,
                "points": [list(p) for p in curve_samples(law, lo, hi, options.curve_points)],
            }
        )
        keep = reservoir_indices(pts.shape[0], options.subsample, options.seed)
        report.scatter.append(
            {
                "law_id": law.law_id,
                "config": law.config.label,
                "x_dataset": law.x_dataset,
                "y_dataset": law.y_dataset,
                "n_total": int(pts.shape[0]),
                "points": [[float(pts[i, 0]), float(pts[i, 1])] for i in keep],
            }
        )
    report.scatter_only = [g.config.label for g in groups if g.config not in fitted]
    return report
