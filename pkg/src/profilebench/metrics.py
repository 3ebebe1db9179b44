"""Step scoring, two-level macro aggregation, and the budget/ratio decomposition.

Per-step arithmetic is exact (``Fraction``). Aggregates are floats.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from statistics import fmean
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .core import (
    AggregateReport,
    InvalidInputError,
    Label,
    PlatformAggregate,
    Prediction,
    StepScore,
    normalize_tag,
)
from .tasks import StepTask

Number = Union[Fraction, float, int]

REPORT_METRICS = ("R", "R_stab", "R_nov", "E_decay", "E_peer", "E_viral", "E_random", "alpha", "B")


def _recall(hits: set[str], subset: Sequence[str]) -> Optional[Fraction]:
    if not subset:
        return None
    return Fraction(sum(1 for t in subset if t in hits), len(subset))


def score_step(task: StepTask, prediction: Prediction) -> StepScore:
    """Score one prediction against the task's labelled pool.

    Predicted tags are matched by normalized string; repeats count once and
    anything outside the pool is charged to ``delta``.
    """
    k = task.k
    if prediction.failed:
        empty = Fraction(0)
        by_label = {lab: task.pool.with_label(lab) for lab in Label}
        return StepScore(
            recall=empty,
            recall_stab=empty if task.gt_keep else None,
            recall_nov=empty if task.gt_new else None,
            delta=k,
            delta_gt=k,
            err_decay=empty if by_label[Label.DECAY] else None,
            err_peer=empty if by_label[Label.PEER] else None,
            err_viral=empty if by_label[Label.VIRAL] else None,
            err_random=empty if by_label[Label.RANDOM] else None,
            alpha=task.alpha,
            k=k,
            failed=True,
        )

    labels = {normalize_tag(t): lab for t, lab in task.pool.tags}
    picked: list[str] = []
    for t in prediction.predicted_tags:
        t = normalize_tag(str(t))
        if t not in picked:
            picked.append(t)
    in_pool = {t for t in picked if t in labels}
    out_of_pool = len(picked) - len(in_pool)
    positives = [normalize_tag(t) for t in task.positives]
    pos_hits = sum(1 for t in positives if t in in_pool)
    distractor_hits = sum(1 for t in in_pool if not labels[t].positive)

    def cls(label: Label) -> Optional[Fraction]:
        return _recall(in_pool, [normalize_tag(t) for t in task.pool.with_label(label)])

    return StepScore(
        recall=_recall(in_pool, positives) or Fraction(0),
        recall_stab=_recall(in_pool, [normalize_tag(t) for t in task.gt_keep]),
        recall_nov=_recall(in_pool, [normalize_tag(t) for t in task.gt_new]),
        delta=distractor_hits + out_of_pool,
        delta_gt=k - pos_hits,
        err_decay=cls(Label.DECAY),
        err_peer=cls(Label.PEER),
        err_viral=cls(Label.VIRAL),
        err_random=cls(Label.RANDOM),
        alpha=task.alpha,
        k=k,
        out_of_pool=out_of_pool,
    )


def verify_identity(score: StepScore) -> Fraction:
    """``alpha*R_stab + (1-alpha)*R_nov - (1 - delta_gt/K)``; zero by construction."""
    if score.recall_stab is None or score.recall_nov is None:
        raise InvalidInputError("identity needs both recalls defined")
    a = score.alpha
    return a * score.recall_stab + (1 - a) * score.recall_nov - (1 - Fraction(score.delta_gt, score.k))


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def macro_average(per_user: Mapping[str, Sequence[Optional[Number]]]) -> Optional[float]:
    """Mean over steps within each user, then over users; ``None`` values skipped."""
    user_means = []
    for values in per_user.values():
        vals = [float(v) for v in values if v is not None]
        if vals:
            user_means.append(fmean(vals))
    return fmean(user_means) if user_means else None


def micro_average(per_user: Mapping[str, Sequence[Optional[Number]]]) -> Optional[float]:
    vals = [float(v) for values in per_user.values() for v in values if v is not None]
    return fmean(vals) if vals else None


def f1_ns(stab: Optional[Number], nov: Optional[Number]) -> Optional[Number]:
    """Harmonic mean of the stability and novelty recalls."""
    if stab is None or nov is None:
        return None
    if stab < 0 or nov < 0:
        raise InvalidInputError("recalls must be non-negative")
    if stab + nov == 0:
        return type(stab + nov)(0)
    return 2 * stab * nov / (stab + nov)


INF = math.inf


@dataclass(frozen=True)
class TradeoffPoint:
    budget: Optional[Number]
    rho: Optional[Number]  # math.inf marks R_stab = 0 < R_nov
    alpha: Optional[Number]


def recall_ratio(stab: Optional[Number], nov: Optional[Number]) -> Optional[Number]:
    if stab is None or nov is None:
        return None
    if stab == 0:
        return INF if nov > 0 else None
    return nov / stab


def tradeoff_decompose(score: StepScore) -> TradeoffPoint:
    if score.k <= 0:
        raise InvalidInputError("K must be positive")
    return TradeoffPoint(
        budget=score.budget,
        rho=recall_ratio(score.recall_stab, score.recall_nov),
        alpha=score.alpha,
    )


def aggregate_tradeoff(stab: Optional[float], nov: Optional[float], alpha: Optional[float]) -> TradeoffPoint:
    """Trade-off coordinates of aggregated recalls (budget via the identity)."""
    budget = None
    if stab is not None and nov is not None and alpha is not None:
        budget = alpha * stab + (1 - alpha) * nov
    return TradeoffPoint(budget=budget, rho=recall_ratio(stab, nov), alpha=alpha)


@dataclass(frozen=True)
class ScoredStep:
    platform: str
    user_id: str
    step_index: int
    score: StepScore


def _group(steps: Iterable[ScoredStep]) -> dict[str, dict[str, list[StepScore]]]:
    out: dict[str, dict[str, list[StepScore]]] = defaultdict(lambda: defaultdict(list))
    for s in steps:
        out[s.platform][s.user_id].append(s.score)
    return out


def _platform_aggregate(users: Mapping[str, Sequence[StepScore]]) -> PlatformAggregate:
    metrics = {
        name: macro_average({u: [sc.metric(name) for sc in scores] for u, scores in users.items()})
        for name in REPORT_METRICS
    }
    f1 = f1_ns(metrics["R_stab"], metrics["R_nov"])
    return PlatformAggregate(
        metrics=metrics,
        f1_ns=f1,
        budget=metrics["B"],
        rho=recall_ratio(metrics["R_stab"], metrics["R_nov"]),
        n_users=len(users),
        n_steps=sum(len(s) for s in users.values()),
    )


def aggregate(steps: Iterable[ScoredStep]) -> AggregateReport:
    """Two-level macro averages per platform; overall is the mean of platforms.

    Overall F1 is the harmonic mean of the overall recalls, not an average of
    per-platform F1 values.
    """
    grouped = _group(steps)
    if not grouped:
        raise InvalidInputError("no scored steps")
    per_platform = {p: _platform_aggregate(users) for p, users in sorted(grouped.items())}
    overall: dict[str, Optional[float]] = {}
    for name in REPORT_METRICS:
        vals = [agg.metrics[name] for agg in per_platform.values() if agg.metrics[name] is not None]
        overall[name] = fmean(vals) if vals else None
    return AggregateReport(
        per_platform=per_platform,
        overall=overall,
        f1_ns=f1_ns(overall["R_stab"], overall["R_nov"]),
        budget=overall["B"],
        rho=recall_ratio(overall["R_stab"], overall["R_nov"]),
        n_users=sum(a.n_users for a in per_platform.values()),
        n_steps=sum(a.n_steps for a in per_platform.values()),
    )


def per_user_f1(scores: Sequence[StepScore]) -> Optional[float]:
    """F1 of one user's step-averaged stability and novelty recalls."""
    stab = macro_average({"u": [s.recall_stab for s in scores]})
    nov = macro_average({"u": [s.recall_nov for s in scores]})
    return f1_ns(stab, nov)


# ---------------------------------------------------------------------------
# Coarse (cluster-level) stability
# ---------------------------------------------------------------------------


ClusterMap = Callable[[str], object]


def cluster_map_from(mapping: Mapping[str, object]) -> ClusterMap:
    """Total cluster map: unmapped tags become their own singleton cluster."""
    return lambda tag: mapping.get(tag, ("singleton", tag))


def coarse_alpha(tasks: Sequence[StepTask], cluster_map: ClusterMap) -> tuple[Optional[float], Optional[float]]:
    """Two-level macro ``alpha`` at anchor level and at cluster level.

    At cluster level a future anchor counts as kept when some history anchor
    shares its cluster.
    """
    fine: dict[str, list[Fraction]] = defaultdict(list)
    coarse: dict[str, list[Fraction]] = defaultdict(list)
    for task in tasks:
        positives = task.positives
        if not positives:
            continue
        hist_clusters = {cluster_map(t) for t, _ in task.history}
        kept = sum(1 for t in positives if cluster_map(t) in hist_clusters)
        fine[task.user_id].append(task.alpha)
        coarse[task.user_id].append(Fraction(kept, len(positives)))
    return macro_average(fine), macro_average(coarse)


# ---------------------------------------------------------------------------
# Geometry for the trade-off plots
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeometryCurves:
    line_x: np.ndarray
    line_y: np.ndarray
    iso_x: np.ndarray
    iso_y: np.ndarray
    slope: float


def constraint_segment(alpha: float, budget: float) -> tuple[float, float]:
    """Feasible ``R_stab`` range on ``alpha*x + (1-alpha)*y = B`` inside the unit box."""
    lo = max(0.0, (budget - (1 - alpha)) / alpha)
    hi = min(1.0, budget / alpha)
    return lo, hi


def geometry_curves(alpha: float, budget: float, f1_level: float, n: int = 201) -> GeometryCurves:
    if not 0 < alpha < 1:
        raise InvalidInputError("alpha must lie strictly between 0 and 1")
    if not 0 <= budget <= 1:
        raise InvalidInputError("budget must lie in [0, 1]")
    lo, hi = constraint_segment(alpha, budget)
    line_x = np.linspace(lo, hi, n)
    line_y = (budget - alpha * line_x) / (1 - alpha)
    c = f1_level
    if c <= 0:
        iso_x = np.array([0.0, 1.0])
        iso_y = np.array([0.0, 0.0])
    else:
        iso_x = np.linspace(c / (2 - c), 1.0, n)
        iso_y = c * iso_x / (2 * iso_x - c)
    return GeometryCurves(line_x, line_y, iso_x, iso_y, slope=-alpha / (1 - alpha))
