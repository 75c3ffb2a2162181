"""Discrimination and calibration metrics, and the per-condition table."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from typing import Sequence

import numpy as np

from .cohort import Cohort, split_cohort
from .errors import MetricError
from .trainer import sigmoid

DEFAULT_THRESHOLD = 0.5


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.all((labels == 0) | (labels == 1)):
        raise MetricError("labels must be 0/1")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise MetricError("both classes must be present")
    if np.any(np.isnan(scores)):
        raise MetricError("scores contain NaN")
    return scores, labels


def auroc_fraction(scores, labels) -> Fraction:
    """Mann-Whitney AUROC as an exact rational, ties counted as one half.

    Scores are sorted once; each block of tied scores contributes
    ``pos_in_block * (2 * neg_below + neg_in_block)`` to twice the U
    statistic.
    """
    scores, labels = _validate(scores, labels)
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order]
    n_pos = int(y.sum())
    n_neg = y.shape[0] - n_pos
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], s.shape[0]]
    pos_in = np.add.reduceat(y.astype(np.int64), starts)
    neg_in = (ends - starts) - pos_in
    neg_below = np.r_[0, np.cumsum(neg_in)[:-1]]
    twice_u = sum(int(p) * (2 * int(nb) + int(nn)) for p, nb, nn in zip(pos_in, neg_below, neg_in))
    return Fraction(twice_u, 2 * n_pos * n_neg)


def auroc(scores, labels) -> float:
    return float(auroc_fraction(scores, labels))


def confusion_at(scores, labels, threshold: float) -> tuple[float, float]:
    """Sensitivity and specificity when ``score >= threshold`` predicts positive."""
    scores, labels = _validate(scores, labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & labels))
    fn = int(np.sum(~pred & labels))
    tn = int(np.sum(~pred & ~labels))
    fp = int(np.sum(pred & ~labels))
    return tp / (tp + fn), tn / (tn + fp)


def brier(scores, labels) -> float:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels must have equal length")
    if np.any((scores < 0) | (scores > 1)):
        raise MetricError("brier needs scores in [0, 1]")
    return float(np.mean((scores - labels) ** 2))


def youden_threshold(scores, labels) -> tuple[float, float, float]:
    """Threshold maximizing ``sensitivity + specificity - 1``.

    Candidates are the distinct scores; the smallest maximizer wins.
    Returns ``(threshold, sensitivity, specificity)``.
    """
    scores, labels = _validate(scores, labels)
    cand = np.unique(scores)
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    tp = pos.shape[0] - np.searchsorted(pos, cand, side="left")
    tn = np.searchsorted(neg, cand, side="left")
    # integer numerators keep ties between candidates exact
    j = tp * neg.shape[0] + tn * pos.shape[0]
    k = int(np.argmax(j))
    return float(cand[k]), int(tp[k]) / pos.shape[0], int(tn[k]) / neg.shape[0]


@dataclass(frozen=True)
class EvalReport:
    condition_tag: str
    auroc: float
    sensitivity: float
    specificity: float
    threshold: float
    brier: float
    youden_threshold: float
    youden_sensitivity: float
    youden_specificity: float
    n_pos: int
    n_neg: int

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


METRICS = ("auroc", "sensitivity", "specificity", "brier", "youden_sensitivity", "youden_specificity")


def evaluate_scores(tag: str, probs, labels, threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    sens, spec = confusion_at(probs, labels, threshold)
    yt, ys, yp = youden_threshold(probs, labels)
    n_pos = int(np.sum(labels == 1))
    return EvalReport(
        condition_tag=tag,
        auroc=auroc(probs, labels),
        sensitivity=sens,
        specificity=spec,
        threshold=threshold,
        brier=brier(probs, labels),
        youden_threshold=yt,
        youden_sensitivity=ys,
        youden_specificity=yp,
        n_pos=n_pos,
        n_neg=int(labels.shape[0] - n_pos),
    )


def model_probabilities(model, registry, cohort: Cohort) -> np.ndarray:
    """Risk for every record of ``cohort`` under a :class:`~fatl.models.SourceModel`."""
    return sigmoid(model.decision_function(registry, cohort.values, cohort.observed))


def compare_conditions(
    cohort: Cohort,
    conditions: Sequence[tuple[str, object]],
    registry,
    *,
    seed: int,
    labeled_n: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
) -> list[EvalReport]:
    """Evaluate each ``(tag, model)`` on the same held-out split.

    The split is the one :func:`fatl.cohort.split_cohort` produces for
    ``(labeled_n, seed)``; the first ``labeled_n`` records are the
    fine-tuning share and are excluded here.
    """
    if len(conditions) < 2:
        raise MetricError("compare_conditions needs at least two conditions")
    _, held_out = split_cohort(cohort, labeled_n, seed)
    return [
        evaluate_scores(tag, model_probabilities(model, registry, held_out), held_out.labels, threshold)
        for tag, model in conditions
    ]


# -- tables ---------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EvalReport.columns())
    for r in reports:
        writer.writerow([_fmt(getattr(r, c)) for c in EvalReport.columns()])
    return buf.getvalue()


def reports_from_csv(text: str) -> list[EvalReport]:
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for row in reader:
        kwargs = {}
        for f in fields(EvalReport):
            raw = row[f.name]
            kwargs[f.name] = raw if f.type in ("str", str) else (int(raw) if f.type in ("int", int) else float(raw))
        out.append(EvalReport(**kwargs))
    return out


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Plain-text table with right-aligned numeric columns."""
    cells = [[str(h) for h in header]] + [
        [f"{v:.4f}" if isinstance(v, float) else str(v) for v in row] for row in rows
    ]
    widths = [max(len(r[k]) for r in cells) for k in range(len(header))]
    lines = []
    for i, r in enumerate(cells):
        parts = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(parts).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def reports_table(reports: Sequence[EvalReport]) -> str:
    header = ["condition", "auroc", "sens", "spec", "brier", "youden_t", "n_pos", "n_neg"]
    rows = [
        [r.condition_tag, r.auroc, r.sensitivity, r.specificity, r.brier, r.youden_threshold, r.n_pos, r.n_neg]
        for r in reports
    ]
    return format_table(header, rows)
