"""Classification metrics, ROC AUC, DeLong's paired test and fold aggregation.

The positive class is malignant (label 1). AUC is the Mann-Whitney
statistic with ties counted as one half, computed through midranks; the
DeLong test uses the same placement values so the two always agree.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from .errors import UndefinedMetricError, ValidationError

METRICS = ("auc", "acc", "specificity", "precision", "recall", "f1")
BIRADS_BUCKETS = {"2-3": ("2", "3"), "4-5": ("4A", "4B", "4C", "5")}


def _split_classes(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError(f"scores and labels must be 1-D and equal length, got {scores.shape} and {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    pos, neg = scores[labels == 1], scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("AUC is undefined unless both classes are present")
    return pos, neg


def _placements(pos: np.ndarray, neg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """DeLong structural components.

    ``v10[i]`` is the fraction of negatives ranked below positive ``i``
    (ties count 1/2); ``v01[j]`` is the fraction of positives ranked above
    negative ``j``.
    """
    m, n = len(pos), len(neg)
    all_ranks = rankdata(np.concatenate([pos, neg]))
    pos_ranks, neg_ranks = all_ranks[:m], all_ranks[m:]
    v10 = (pos_ranks - rankdata(pos)) / n
    v01 = 1.0 - (neg_ranks - rankdata(neg)) / m
    return v10, v01


def _mann_whitney(pos: np.ndarray, neg: np.ndarray) -> float:
    # midrank sums are exact half-integers, so the only rounding is the final division
    m, n = len(pos), len(neg)
    u = rankdata(np.concatenate([pos, neg]))[:m].sum() - m * (m + 1) / 2
    return float(u / (m * n))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score of a positive > score of a negative) + 1/2 P(tie)."""
    return _mann_whitney(*_split_classes(scores, labels))


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """False-positive rates, true-positive rates and thresholds (descending)."""
    pos, neg = _split_classes(scores, labels)
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    tpr = np.array([(pos >= t).mean() for t in thresholds])
    fpr = np.array([(neg >= t).mean() for t in thresholds])
    return np.r_[0.0, fpr], np.r_[0.0, tpr], np.r_[np.inf, thresholds]


@dataclass
class ConfusionMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    acc: float
    specificity: float | None
    precision: float | None
    recall: float | None
    f1: float | None

    @property
    def undefined(self) -> list[str]:
        return [k for k in ("specificity", "precision", "recall", "f1") if getattr(self, k) is None]


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def confusion_metrics(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> ConfusionMetrics:
    """ACC, specificity, precision, recall and F1 at ``score >= threshold``.

    A metric whose denominator is empty is ``None`` (listed in
    :attr:`ConfusionMetrics.undefined`), never silently zero.
    """
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must be in (0, 1), got {threshold}")
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if len(scores) == 0 or scores.shape != labels.shape:
        raise ValidationError("scores and labels must be non-empty and of equal length")
    pred = scores >= threshold
    tp = int((pred & (labels == 1)).sum())
    fp = int((pred & (labels == 0)).sum())
    fn = int((~pred & (labels == 1)).sum())
    tn = int((~pred & (labels == 0)).sum())
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    if precision is None or recall is None:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ConfusionMetrics(
        tp, fp, fn, tn,
        acc=(tp + tn) / len(scores),
        specificity=_ratio(tn, tn + fp),
        precision=precision,
        recall=recall,
        f1=f1,
    )


@dataclass
class DeLongResult:
    auc_a: float
    auc_b: float
    z: float
    p_value: float


def delong_test(scores_a: Sequence[float], scores_b: Sequence[float], labels: Sequence[int]) -> DeLongResult:
    """Two-sided DeLong test for the difference of two correlated AUCs.

    Zero variance of the difference gives ``p = 1`` when the AUCs are equal
    (and ``p = 0`` otherwise).
    """
    labels = np.asarray(labels)
    if len(scores_a) != len(labels) or len(scores_b) != len(labels):
        raise ValidationError("both score sets must have one score per label")
    pa, na = _split_classes(scores_a, labels)
    pb, nb = _split_classes(scores_b, labels)
    m, n = len(pa), len(na)
    v10a, v01a = _placements(pa, na)
    v10b, v01b = _placements(pb, nb)
    auc_a, auc_b = _mann_whitney(pa, na), _mann_whitney(pb, nb)

    def cov(x, y):
        return float(np.cov(x, y)[0, 1]) if len(x) > 1 else 0.0

    var_a = cov(v10a, v10a) / m + cov(v01a, v01a) / n
    var_b = cov(v10b, v10b) / m + cov(v01b, v01b) / n
    cov_ab = cov(v10a, v10b) / m + cov(v01a, v01b) / n
    var = var_a + var_b - 2 * cov_ab
    diff = auc_a - auc_b
    if var <= 1e-15:
        if abs(diff) <= 1e-12:
            return DeLongResult(auc_a, auc_b, 0.0, 1.0)
        return DeLongResult(auc_a, auc_b, math.copysign(math.inf, diff), 0.0)
    z = diff / math.sqrt(var)
    p = float(np.clip(2.0 * norm.sf(abs(z)), 0.0, 1.0))
    return DeLongResult(auc_a, auc_b, z, p)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricValue:
    mean: float | None
    std: float | None
    values: list[float | None] = field(default_factory=list)

    def __str__(self):
        if self.mean is None:
            return "undefined"
        return f"{self.mean:.3f}±{self.std:.3f}"


@dataclass
class MetricsReport:
    """Per-fold metrics plus their mean and sample standard deviation.

    JSON schema::

        {"folds": [{"fold": int, "n": int, "auc": float|null, ...,
                    "undefined": [str]}],
         "aggregate": {"auc": {"mean": float|null, "std": float|null,
                               "values": [float|null]}, ...},
         "threshold": float,
         "delong": {"<name>": {"auc_a", "auc_b", "z", "p_value"}},
         "subgroups": {"<bucket>": <MetricsReport JSON>}}
    """

    folds: list[dict]
    aggregate: dict[str, MetricValue]
    threshold: float = 0.5
    delong: dict[str, DeLongResult] = field(default_factory=dict)
    subgroups: dict[str, "MetricsReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "folds": self.folds,
            "aggregate": {k: asdict(v) for k, v in self.aggregate.items()},
            "threshold": self.threshold,
            "delong": {k: asdict(v) for k, v in self.delong.items()},
            "subgroups": {k: v.to_dict() for k, v in self.subgroups.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False, default=_json_default)

    def to_table(self) -> str:
        lines = []
        header = f"{'':<10}" + "".join(f"{m:>14}" for m in METRICS)
        lines.append(header)
        for f in self.folds:
            cells = "".join(f"{_fmt(f.get(m)):>14}" for m in METRICS)
            lines.append(f"{'fold ' + str(f['fold']):<10}{cells}")
        lines.append(f"{'mean±std':<10}" + "".join(f"{str(self.aggregate[m]):>14}" for m in METRICS))
        for name, d in self.delong.items():
            lines.append(f"DeLong vs {name}: AUC {d.auc_a:.3f} vs {d.auc_b:.3f}, z={d.z:.3f}, p={d.p_value:.4g}")
        for bucket, sub in self.subgroups.items():
            lines.append("")
            lines.append(f"BI-RADS {bucket}")
            lines.append(sub.to_table())
        return "\n".join(lines)


def _json_default(o):
    if isinstance(o, float) and math.isinf(o):
        return None
    raise TypeError(f"not JSON serializable: {o!r}")


def _fmt(v) -> str:
    return "undefined" if v is None else f"{v:.3f}"


def compute_metrics(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> dict:
    cm = confusion_metrics(scores, labels, threshold)
    try:
        auc = roc_auc(scores, labels)
    except UndefinedMetricError:
        auc = None
    undefined = cm.undefined + (["auc"] if auc is None else [])
    return {
        "n": len(scores),
        "auc": auc,
        "acc": cm.acc,
        "specificity": cm.specificity,
        "precision": cm.precision,
        "recall": cm.recall,
        "f1": cm.f1,
        "tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn,
        "undefined": undefined,
    }


def fold_report(rows: Iterable, fold: int, threshold: float = 0.5) -> dict:
    """Metrics for one fold of a score table (rows with ``fold``, ``score_malignant``, ``label``)."""
    sel = [r for r in rows if r.fold == fold]
    if not sel:
        raise ValidationError(f"no rows for fold {fold}")
    d = compute_metrics([r.score_malignant for r in sel], [r.label for r in sel], threshold)
    d["fold"] = fold
    return d


def aggregate(fold_reports: Sequence[dict], threshold: float = 0.5) -> MetricsReport:
    """Mean and sample standard deviation (n-1; 0 for one fold) of each metric.

    Folds where a metric is undefined are left out of that metric's summary.
    """
    if not fold_reports:
        raise ValidationError("aggregate needs at least one fold")
    agg = {}
    for m in METRICS:
        vals = [f.get(m) for f in fold_reports]
        defined = np.array([v for v in vals if v is not None], dtype=float)
        if len(defined) == 0:
            agg[m] = MetricValue(None, None, vals)
            continue
        std = float(defined.std(ddof=1)) if len(defined) > 1 else 0.0
        agg[m] = MetricValue(float(defined.mean()), std, vals)
    return MetricsReport(folds=list(fold_reports), aggregate=agg, threshold=threshold)


def report_from_scores(rows: Sequence, threshold: float = 0.5) -> MetricsReport:
    folds = sorted({r.fold for r in rows})
    return aggregate([fold_report(rows, f, threshold) for f in folds], threshold)


def birads_bucket(birads: str | None) -> str | None:
    for name, members in BIRADS_BUCKETS.items():
        if birads in members:
            return name
    return None


def subgroup_reports(rows: Sequence, birads_by_id: dict[str, str | None], threshold: float = 0.5) -> dict[str, MetricsReport]:
    """Filter the score table by BI-RADS bucket and report each bucket."""
    out = {}
    for bucket in BIRADS_BUCKETS:
        sel = [r for r in rows if birads_bucket(birads_by_id.get(r.image_id)) == bucket]
        if sel:
            out[bucket] = report_from_scores(sel, threshold)
    return out
