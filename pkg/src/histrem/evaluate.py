"""Segment-level evaluation: majority-vote aggregation, confusion metrics
with remission as the negative class, and exact Mann-Whitney AUC.

Aggregation ties break toward ACTIVITY (a false alarm is preferred over a
missed activity call); the policy is a named constant surfaced in reports.
The segment score fed to AUC is the mean per-image activity probability.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .domain import ACTIVITY, REMISSION, BinaryLabel

TIE_POLICY = "activity"


class EmptyPredictionSet(ValueError):
    pass


class SingleClassOnly(ValueError):
    pass


def aggregate(image_labels: list[BinaryLabel]) -> BinaryLabel:
    """Highest-frequency label; exact ties resolve to ACTIVITY."""
    if not image_labels:
        raise EmptyPredictionSet("cannot aggregate an empty prediction list")
    n_pos = sum(int(v) for v in image_labels)
    n_neg = len(image_labels) - n_pos
    return ACTIVITY if n_pos >= n_neg else REMISSION


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    tn: int
    fp: int

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.tn + self.fp


def confusion(pairs: list[tuple[BinaryLabel, BinaryLabel]]) -> ConfusionCounts:
    """Counts from (predicted, truth) pairs; positive class is ACTIVITY."""
    if not pairs:
        raise EmptyPredictionSet("cannot build confusion counts from no pairs")
    tp = fn = tn = fp = 0
    for pred, truth in pairs:
        if truth == ACTIVITY:
            if pred == ACTIVITY:
                tp += 1
            else:
                fn += 1
        else:
            if pred == REMISSION:
                tn += 1
            else:
                fp += 1
    return ConfusionCounts(tp=tp, fn=fn, tn=tn, fp=fp)


def metrics(c: ConfusionCounts) -> tuple[float, float | None, float | None]:
    """(accuracy, sensitivity, specificity); undefined rates come back None."""
    accuracy = (c.tp + c.tn) / c.total
    sensitivity = c.tp / (c.tp + c.fn) if (c.tp + c.fn) >= 1 else None
    specificity = c.tn / (c.tn + c.fp) if (c.tn + c.fp) >= 1 else None
    return accuracy, sensitivity, specificity


def auc(scored: list[tuple[float, BinaryLabel]]) -> float:
    """Mann-Whitney AUC via average ranks; ties count one half.

    Equals the fraction of (positive, negative) pairs ranked correctly, and
    the trapezoidal area under the ROC curve, exactly.
    """
    scores = np.asarray([s for s, _ in scored], dtype=np.float64)
    labels = np.asarray([int(lab) for _, lab in scored], dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassOnly("AUC needs at least one positive and one negative")

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def roc_points(scored: list[tuple[float, BinaryLabel]]) -> list[tuple[float, float]]:
    """ROC polyline as (fpr, tpr) pairs from (0,0) to (1,1), one vertex per
    distinct score threshold (tied scores collapse to one vertex)."""
    scores = np.asarray([s for s, _ in scored], dtype=np.float64)
    labels = np.asarray([int(lab) for _, lab in scored], dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassOnly("ROC needs at least one positive and one negative")
    order = np.argsort(-scores, kind="mergesort")
    points = [(0.0, 0.0)]
    tp = fp = 0
    for i, idx in enumerate(order):
        if labels[idx] == 1:
            tp += 1
        else:
            fp += 1
        last = i + 1 == len(order)
        if last or scores[order[i + 1]] != scores[idx]:
            points.append((fp / n_neg, tp / n_pos))
    return points


@dataclass
class SegmentPrediction:
    segment_id: str
    truth: BinaryLabel
    image_labels: list[BinaryLabel]
    image_probs: list[float]
    aggregate_label: BinaryLabel
    aggregate_score: float


@dataclass
class EvalReport:
    counts: ConfusionCounts
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    auc: float | None
    segments: list[SegmentPrediction]
    config_digest: str = ""
    dataset_digest: str = ""
    tie_policy: str = TIE_POLICY

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def scored(self) -> list[tuple[float, BinaryLabel]]:
        return [(s.aggregate_score, s.truth) for s in self.segments]

    def to_lines(self) -> list[str]:
        """Line-delimited serialization: one summary record, then one record
        per segment, sorted by segment id. Byte-stable."""
        summary = {
            "kind": "summary",
            "tp": self.counts.tp,
            "fn": self.counts.fn,
            "tn": self.counts.tn,
            "fp": self.counts.fp,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "auc": self.auc,
            "n_segments": self.n_segments,
            "tie_policy": self.tie_policy,
            "config_digest": self.config_digest,
            "dataset_digest": self.dataset_digest,
        }
        lines = [json.dumps(summary, sort_keys=True, separators=(",", ":"))]
        for seg in self.segments:
            rec = {
                "kind": "segment",
                "segment_id": seg.segment_id,
                "truth": int(seg.truth),
                "predicted": int(seg.aggregate_label),
                "score": seg.aggregate_score,
                "image_labels": [int(v) for v in seg.image_labels],
                "image_probs": seg.image_probs,
            }
            lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
        return lines


def report_from_lines(lines: list[str]) -> EvalReport:
    """Parse a serialized report and re-verify metric self-consistency."""
    summary = json.loads(lines[0])
    segments = []
    for line in lines[1:]:
        rec = json.loads(line)
        image_labels = [BinaryLabel(v) for v in rec["image_labels"]]
        probs = np.asarray(rec["image_probs"], dtype=np.float64)
        segments.append(
            SegmentPrediction(
                segment_id=rec["segment_id"],
                truth=BinaryLabel(rec["truth"]),
                image_labels=image_labels,
                image_probs=[float(p) for p in probs],
                aggregate_label=aggregate(image_labels),
                aggregate_score=float(probs.mean()),
            )
        )
    report = evaluate_predictions(
        segments,
        config_digest=summary["config_digest"],
        dataset_digest=summary["dataset_digest"],
    )
    stored = (
        summary["tp"], summary["fn"], summary["tn"], summary["fp"],
        summary["accuracy"], summary["sensitivity"], summary["specificity"], summary["auc"],
    )
    recomputed = (
        report.counts.tp, report.counts.fn, report.counts.tn, report.counts.fp,
        report.accuracy, report.sensitivity, report.specificity, report.auc,
    )
    if stored != recomputed:
        raise ValueError(f"report self-consistency check failed: {stored} != {recomputed}")
    return report


def evaluate_predictions(
    segments: list[SegmentPrediction],
    config_digest: str = "",
    dataset_digest: str = "",
) -> EvalReport:
    """Assemble a report from per-segment predictions (order-invariant)."""
    if not segments:
        raise EmptyPredictionSet("no segments to evaluate")
    segments = sorted(segments, key=lambda s: s.segment_id)
    counts = confusion([(s.aggregate_label, s.truth) for s in segments])
    accuracy, sensitivity, specificity = metrics(counts)
    try:
        area = auc([(s.aggregate_score, s.truth) for s in segments])
    except SingleClassOnly:
        area = None
    return EvalReport(
        counts=counts,
        accuracy=accuracy,
        sensitivity=sensitivity,
        specificity=specificity,
        auc=area,
        segments=segments,
        config_digest=config_digest,
        dataset_digest=dataset_digest,
    )


def evaluate_segments(
    predict_probs_fn,
    segment_batches: list[tuple[str, np.ndarray, BinaryLabel]],
    config_digest: str = "",
    dataset_digest: str = "",
) -> EvalReport:
    """Run image-level inference and aggregate to segment level.

    predict_probs_fn maps an image stack [k, S, S, 3] to k activity
    probabilities. Per-image predicted label is prob >= 0.5 (equivalently
    the argmax over the two softmax outputs).
    """
    predictions = []
    for segment_id, images, truth in segment_batches:
        probs = np.asarray(predict_probs_fn(images), dtype=np.float64)
        labels = [ACTIVITY if p >= 0.5 else REMISSION for p in probs]
        predictions.append(
            SegmentPrediction(
                segment_id=segment_id,
                truth=truth,
                image_labels=labels,
                image_probs=[float(p) for p in probs],
                aggregate_label=aggregate(labels),
                aggregate_score=float(probs.mean()),
            )
        )
    return evaluate_predictions(predictions, config_digest, dataset_digest)
