"""Time-windowed model evaluation and composite pipeline scoring.

Every trained model is scored on every evaluation interval, giving a
models x intervals matrix per metric. A composite mapping picks one model
per interval: the *currently active* variant takes the most recent model
whose training-data end timestamp is at or before the interval anchor; the
*currently trained* variant takes the model right after the active one
(clamped at the last model). Indexing the matrix through the mapping gives
the composite series, whose mean over retained intervals is the pipeline
score. Scores plus a cost measure per pipeline form the cost-accuracy
feasible set with Pareto flags.

Interval membership is half-open [start, end), except the final interval of
a sequence which closes its end so the last samples are not dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class EvaluatorError(Exception):
    pass


@dataclass(frozen=True)
class EvaluationInterval:
    start: int
    anchor: int
    end: int
    closed_end: bool = False

    def contains(self, timestamps: np.ndarray) -> np.ndarray:
        if self.closed_end:
            return (timestamps >= self.start) & (timestamps <= self.end)
        return (timestamps >= self.start) & (timestamps < self.end)


@dataclass(frozen=True)
class IntervalSpec:
    kind: str  # tumbling | sliding
    length: int
    stride: int | None = None  # sliding only
    anchor: str = "start"  # start | center

    def __post_init__(self):
        if self.kind not in ("tumbling", "sliding"):
            raise EvaluatorError(f"unknown interval kind {self.kind!r}")
        if self.length <= 0:
            raise EvaluatorError("interval length must be positive")
        if self.kind == "sliding" and (self.stride is None or self.stride <= 0):
            raise EvaluatorError("sliding intervals need a positive stride")
        if self.anchor not in ("start", "center"):
            raise EvaluatorError(f"unknown anchor placement {self.anchor!r}")


def generate_intervals(spec: IntervalSpec, t0: int, t1: int) -> list[EvaluationInterval]:
    """Evaluation intervals covering [t0, t1), ordered by anchor.

    Tumbling windows tile the range, the final one clipped at t1; sliding
    windows start every ``stride`` while the start is before t1 and keep
    their full length.
    """
    if t0 >= t1:
        raise EvaluatorError(f"empty evaluation range [{t0}, {t1})")
    step = spec.length if spec.kind == "tumbling" else spec.stride
    intervals = []
    start = t0
    while start < t1:
        end = start + spec.length
        if spec.kind == "tumbling":
            end = min(end, t1)
        anchor = start if spec.anchor == "start" else (start + end) // 2
        intervals.append(EvaluationInterval(start, anchor, end))
        start += step
    last = intervals[-1]
    intervals[-1] = EvaluationInterval(last.start, last.anchor, last.end, closed_end=True)
    return intervals


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metric:
    name: str  # accuracy | top_k_accuracy | weighted_f1
    k: int | None = None

    def __post_init__(self):
        if self.name not in ("accuracy", "top_k_accuracy", "weighted_f1"):
            raise EvaluatorError(f"unknown metric {self.name!r}")
        if self.name == "top_k_accuracy" and (self.k is None or self.k < 1):
            raise EvaluatorError("top_k_accuracy needs k >= 1")

    @property
    def metric_id(self) -> str:
        return f"top_{self.k}_accuracy" if self.name == "top_k_accuracy" else self.name


def _weighted_f1(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> float:
    score = 0.0
    total = len(y_true)
    for c in range(num_classes):
        support = int((y_true == c).sum())
        if support == 0:
            continue
        tp = int(((y_pred == c) & (y_true == c)).sum())
        predicted = int((y_pred == c).sum())
        precision = tp / predicted if predicted else 0.0
        recall = tp / support
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        score += support / total * f1
    return score


def evaluate_model(
    model,
    interval: EvaluationInterval,
    features: np.ndarray,
    labels: np.ndarray,
    timestamps: np.ndarray,
    metric: Metric,
) -> float | None:
    """Metric score on eval samples inside the interval; None when empty."""
    mask = interval.contains(np.asarray(timestamps))
    if not mask.any():
        return None
    X = features[mask]
    y = labels[mask]
    logits = model.logits(X)
    if metric.name == "accuracy":
        return float((logits.argmax(axis=1) == y).mean())
    if metric.name == "top_k_accuracy":
        if metric.k > logits.shape[1]:
            raise EvaluatorError(f"k={metric.k} exceeds {logits.shape[1]} classes")
        top = np.argsort(-logits, axis=1, kind="stable")[:, : metric.k]
        return float((top == y[:, None]).any(axis=1).mean())
    return _weighted_f1(y, logits.argmax(axis=1), logits.shape[1])


@dataclass
class EvaluationMatrix:
    metric_id: str
    scores: np.ndarray  # (models, intervals), undefined cells hold nan
    defined: np.ndarray  # bool (models, intervals)

    @property
    def shape(self):
        return self.scores.shape


def build_matrix(
    models: Sequence, intervals: Sequence[EvaluationInterval],
    features, labels, timestamps, metric: Metric,
) -> EvaluationMatrix:
    if not len(models) or not len(intervals):
        raise EvaluatorError("need at least one model and one interval")
    scores = np.full((len(models), len(intervals)), np.nan)
    defined = np.zeros((len(models), len(intervals)), dtype=bool)
    for i, model in enumerate(models):
        for j, interval in enumerate(intervals):
            value = evaluate_model(model, interval, features, labels, timestamps, metric)
            if value is not None:
                scores[i, j] = value
                defined[i, j] = True
    return EvaluationMatrix(metric.metric_id, scores, defined)


# ---------------------------------------------------------------------------
# composite models


def composite_mapping(
    model_end_times: Sequence[int],
    intervals: Sequence[EvaluationInterval],
    variant: str,
    undefined_trained: str = "first",
) -> list[int | None]:
    """Interval index -> model index (None where undefined).

    ``currently_active``: most recent model with end time <= the anchor
    (a model finishing exactly on the anchor counts as completed).
    ``currently_trained``: the model after the active one, clamped to the
    last; when no model is active yet, the first model by default
    (``undefined_trained="last"`` selects the final model instead).
    """
    if variant not in ("currently_active", "currently_trained"):
        raise EvaluatorError(f"unknown composite variant {variant!r}")
    if undefined_trained not in ("first", "last"):
        raise EvaluatorError(f"unknown undefined_trained choice {undefined_trained!r}")
    ends = np.asarray(model_end_times)
    if len(ends) == 0:
        raise EvaluatorError("no models to map")
    if (np.diff(ends) < 0).any():
        raise EvaluatorError("models must be ordered by end timestamp")
    mapping: list[int | None] = []
    for interval in intervals:
        qualifying = np.nonzero(ends <= interval.anchor)[0]
        active = int(qualifying[-1]) if len(qualifying) else None
        if variant == "currently_active":
            mapping.append(active)
        elif active is None:
            mapping.append(0 if undefined_trained == "first" else len(ends) - 1)
        else:
            mapping.append(min(active + 1, len(ends) - 1))
    return mapping


def composite_series(matrix: EvaluationMatrix, mapping: Sequence[int | None]) -> list[float | None]:
    """Index the matrix through the mapping; gaps stay None, never 0."""
    if len(mapping) != matrix.shape[1]:
        raise EvaluatorError(
            f"mapping covers {len(mapping)} intervals, matrix has {matrix.shape[1]}"
        )
    series: list[float | None] = []
    for j, model_idx in enumerate(mapping):
        if model_idx is None or not matrix.defined[model_idx, j]:
            series.append(None)
        else:
            series.append(float(matrix.scores[model_idx, j]))
    return series


def pipeline_score(
    series: Sequence[float | None],
    skip_policy: str = "skip_gaps",
    cutoff_index: int | None = None,
) -> float:
    """Mean of the retained composite-series entries.

    ``after_first_common_trigger`` additionally drops every entry before
    ``cutoff_index`` so multiple pipelines average over the same intervals.
    """
    if skip_policy not in ("skip_gaps", "after_first_common_trigger"):
        raise EvaluatorError(f"unknown skip policy {skip_policy!r}")
    values = list(series)
    if skip_policy == "after_first_common_trigger":
        if cutoff_index is None:
            raise EvaluatorError("after_first_common_trigger needs a cutoff index")
        values = values[cutoff_index:]
    kept = [v for v in values if v is not None]
    if not kept:
        raise EvaluatorError("no defined entries left after skipping")
    return float(np.mean(kept))


# ---------------------------------------------------------------------------
# feasible set


@dataclass(frozen=True)
class FeasiblePoint:
    pipeline_id: str
    score: float
    cost: float
    pareto_optimal: bool


def pareto_flags(points: Sequence[tuple[float, float]]) -> list[bool]:
    """points are (score, cost); optimal iff nothing is (>= score, <= cost)
    with one inequality strict."""
    flags = []
    for i, (s_i, c_i) in enumerate(points):
        dominated = any(
            (s_j >= s_i and c_j <= c_i) and (s_j > s_i or c_j < c_i)
            for j, (s_j, c_j) in enumerate(points)
            if j != i
        )
        flags.append(not dominated)
    return flags


def first_defined_index(series: Sequence[float | None]) -> int:
    for i, v in enumerate(series):
        if v is not None:
            return i
    raise EvaluatorError("series has no defined entries")


def feasible_set(
    runs: Sequence[dict],
    metric_id: str,
    cost_kind: str,
    variant: str = "currently_active",
    skip_policy: str = "after_first_common_trigger",
) -> list[FeasiblePoint]:
    """Cost-accuracy points for a set of runs sharing one evaluation setup.

    ``runs`` are run-report dicts (see reports module): each carries its
    evaluation context, composite series per metric/variant, and costs. The
    common cutoff for ``after_first_common_trigger`` is the first interval
    where every run has a defined composite entry.
    """
    if not runs:
        raise EvaluatorError("no runs to compare")
    contexts = [r["eval_context"] for r in runs]
    if any(c != contexts[0] for c in contexts[1:]):
        raise EvaluatorError("runs do not share dataset/split/interval specs")
    series_per_run = []
    for r in runs:
        try:
            series_per_run.append(r["series"][metric_id][variant])
        except KeyError:
            raise EvaluatorError(
                f"run {r.get('pipeline_id')} lacks series for {metric_id}/{variant}"
            ) from None
    cutoff = None
    if skip_policy == "after_first_common_trigger":
        cutoff = max(first_defined_index(s) for s in series_per_run)
    points = []
    for r, series in zip(runs, series_per_run):
        if cost_kind not in r["costs"]:
            raise EvaluatorError(f"unknown cost kind {cost_kind!r}")
        score = pipeline_score(series, skip_policy, cutoff)
        points.append((str(r["pipeline_id"]), score, float(r["costs"][cost_kind])))
    flags = pareto_flags([(s, c) for _, s, c in points])
    result = [
        FeasiblePoint(pid, score, cost, flag)
        for (pid, score, cost), flag in zip(points, flags)
    ]
    result.sort(key=lambda p: (p.cost, p.pipeline_id))
    return result
