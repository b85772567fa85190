"""Detection and classification evaluation.

Detection scoring follows the usual single-threshold protocol: greedy
score-descending matching at an IoU cutoff, an all-point interpolated
precision/recall curve per class, and the unweighted mean of per-class AP.
Classification scoring produces the per-class precision/recall/F1 table with
macro and weighted averages plus accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, Optional, Sequence

from .errors import ValidationError
from .ingest import STAGE_CLASSES, BoundingBox

if TYPE_CHECKING:
    from .detect import Detection


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes under the max-exclusive convention."""
    inter_h = min(a.max_row, b.max_row) - max(a.min_row, b.min_row)
    inter_w = min(a.max_col, b.max_col) - max(a.min_col, b.min_col)
    if inter_h <= 0 or inter_w <= 0:
        return 0.0
    inter = inter_h * inter_w
    union = a.area + b.area - inter
    return inter / union


@dataclass(frozen=True)
class MatchResult:
    """Outcome of matching scored detections against ground-truth boxes."""

    det_is_tp: tuple[bool, ...]
    det_matched_gt: tuple[Optional[int], ...]
    gt_matched: tuple[bool, ...]
    iou_threshold: float

    @property
    def tp_count(self) -> int:
        return sum(self.det_is_tp)


def _score_order(dets: Sequence["Detection"]) -> list[int]:
    # Stable sort: equal scores keep input order.
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(
    dets: Sequence["Detection"],
    gts: Sequence[BoundingBox],
    iou_threshold: float,
) -> MatchResult:
    """Greedy one-to-one matching in descending score order.

    Each detection claims the still-unmatched ground truth of highest IoU,
    provided that IoU reaches the threshold; otherwise it is a false positive.
    Score ties are broken by input order, IoU ties by lowest ground-truth index.
    """
    if not (0.0 < iou_threshold < 1.0):
        raise ValidationError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    for d in dets:
        if not (0.0 <= d.score <= 1.0):
            raise ValidationError(f"detection score out of range: {d.score}")

    is_tp = [False] * len(dets)
    matched_gt: list[Optional[int]] = [None] * len(dets)
    gt_taken = [False] * len(gts)
    for i in _score_order(dets):
        best_iou = 0.0
        best_j = None
        for j, gt in enumerate(gts):
            if gt_taken[j]:
                continue
            v = iou(dets[i].bbox, gt)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j is not None and best_iou >= iou_threshold:
            is_tp[i] = True
            matched_gt[i] = best_j
            gt_taken[best_j] = True
    return MatchResult(
        det_is_tp=tuple(is_tp),
        det_matched_gt=tuple(matched_gt),
        gt_matched=tuple(gt_taken),
        iou_threshold=iou_threshold,
    )


@dataclass(frozen=True)
class PRCurve:
    """(recall, precision) points ordered by descending score cutoff."""

    points: tuple[tuple[float, float], ...]


def pr_curve(
    dets: Sequence["Detection"],
    gts: Sequence[BoundingBox],
    iou_threshold: float,
) -> PRCurve:
    """Precision/recall at every prefix of the score-ranked detection list."""
    match = match_detections(dets, gts, iou_threshold)
    order = _score_order(dets)
    points = []
    tp = 0
    for rank, i in enumerate(order, start=1):
        if match.det_is_tp[i]:
            tp += 1
        recall = tp / len(gts) if gts else 0.0
        points.append((recall, tp / rank))
    return PRCurve(points=tuple(points))


def average_precision(
    dets: Sequence["Detection"],
    gts: Sequence[BoundingBox],
    iou_threshold: float,
) -> float:
    """Area under the monotone-interpolated precision/recall staircase.

    Degenerate conventions: with no ground truths the result is 1.0 when there
    are also no detections and 0.0 otherwise.
    """
    if not gts:
        return 1.0 if not dets else 0.0
    if not dets:
        return 0.0
    curve = pr_curve(dets, gts, iou_threshold).points
    # Replace each precision by the maximum at equal-or-higher recall, then
    # sum rectangles over recall steps.
    n = len(curve)
    interp = [0.0] * n
    running = 0.0
    for k in range(n - 1, -1, -1):
        running = max(running, curve[k][1])
        interp[k] = running
    ap = 0.0
    prev_recall = 0.0
    for k in range(n):
        recall = curve[k][0]
        if recall > prev_recall:
            ap += (recall - prev_recall) * interp[k]
            prev_recall = recall
    return ap


def mean_average_precision(per_class_ap: Mapping[str, float]) -> float:
    """Unweighted mean of per-class APs; a single class passes through."""
    if not per_class_ap:
        raise ValidationError("mean_average_precision requires at least one class")
    values = list(per_class_ap.values())
    return sum(values) / len(values)


def detection_recall(match: MatchResult, gts: Sequence[BoundingBox]) -> float:
    """Matched fraction of ground truths; vacuously 1.0 with no ground truths."""
    if len(match.gt_matched) != len(gts):
        raise ValidationError(
            f"match covers {len(match.gt_matched)} ground truths, got {len(gts)}"
        )
    if not gts:
        return 1.0
    return match.tp_count / len(gts)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Row = true class, column = predicted class, canonical class order."""

    classes: tuple[str, ...]
    counts: tuple[tuple[int, ...], ...]

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    @property
    def trace(self) -> int:
        return sum(self.counts[i][i] for i in range(len(self.classes)))


def confusion_matrix(
    truths: Sequence[str],
    preds: Sequence[str],
    classes: Sequence[str] = STAGE_CLASSES,
) -> ConfusionMatrix:
    if len(truths) != len(preds):
        raise ValidationError(
            f"length mismatch: {len(truths)} truths vs {len(preds)} predictions"
        )
    if not truths:
        raise ValidationError("cannot evaluate an empty prediction set")
    index = {c: k for k, c in enumerate(classes)}
    counts = [[0] * len(classes) for _ in classes]
    for t, p in zip(truths, preds):
        if t not in index:
            raise ValidationError(f"unknown true label: {t!r}")
        if p not in index:
            raise ValidationError(f"unknown predicted label: {p!r}")
        counts[index[t]][index[p]] += 1
    return ConfusionMatrix(
        classes=tuple(classes), counts=tuple(tuple(row) for row in counts)
    )


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class ClassificationReport:
    classes: tuple[str, ...]
    per_class: tuple[ClassMetrics, ...]
    macro_avg: tuple[float, float, float]
    weighted_avg: tuple[float, float, float]
    accuracy: float

    @property
    def total_support(self) -> int:
        return sum(m.support for m in self.per_class)

    def to_json_dict(self) -> dict:
        return {
            "per_class": {
                c: {
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                }
                for c, m in zip(self.classes, self.per_class)
            },
            "macro_avg": {
                "precision": self.macro_avg[0],
                "recall": self.macro_avg[1],
                "f1": self.macro_avg[2],
            },
            "weighted_avg": {
                "precision": self.weighted_avg[0],
                "recall": self.weighted_avg[1],
                "f1": self.weighted_avg[2],
            },
            "accuracy": self.accuracy,
        }

    def to_text(self) -> str:
        """Fixed two-decimal table: class rows, macro/weighted rows, accuracy."""
        name_width = max(12, max(len(c) for c in self.classes) + 1)
        header = f"{'':<{name_width}} {'precision':>9} {'recall':>7} {'f1-score':>8} {'support':>8}"
        lines = [header]
        for c, m in zip(self.classes, self.per_class):
            lines.append(
                f"{c.capitalize():<{name_width}} {m.precision:>9.2f} {m.recall:>7.2f} "
                f"{m.f1:>8.2f} {m.support:>8d}"
            )
        total = self.total_support
        for label, triple in (("Macro avg", self.macro_avg), ("Weighted avg", self.weighted_avg)):
            lines.append(
                f"{label:<{name_width}} {triple[0]:>9.2f} {triple[1]:>7.2f} "
                f"{triple[2]:>8.2f} {total:>8d}"
            )
        lines.append(f"{'Accuracy':<{name_width}} {'':>9} {'':>7} {self.accuracy:>8.2f} {total:>8d}")
        return "\n".join(lines)


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def classification_report(
    truths: Sequence[str],
    preds: Sequence[str],
    classes: Sequence[str] = STAGE_CLASSES,
) -> ClassificationReport:
    """Per-class precision/recall/F1 with macro and weighted averages.

    Values are kept at full precision; rendering rounds to two decimals.
    Weighted recall is computed as trace/total, which is the same quantity as
    the support-weighted mean but exactly equal to accuracy in floating point.
    """
    cm = confusion_matrix(truths, preds, classes)
    n = len(cm.classes)
    total = cm.total
    row_sums = [sum(cm.counts[i]) for i in range(n)]
    col_sums = [sum(cm.counts[i][j] for i in range(n)) for j in range(n)]

    per_class = []
    for k in range(n):
        tp = cm.counts[k][k]
        precision = tp / col_sums[k] if col_sums[k] else 0.0
        recall = tp / row_sums[k] if row_sums[k] else 0.0
        per_class.append(
            ClassMetrics(
                precision=precision,
                recall=recall,
                f1=f1_score(precision, recall),
                support=row_sums[k],
            )
        )

    macro = (
        sum(m.precision for m in per_class) / n,
        sum(m.recall for m in per_class) / n,
        sum(m.f1 for m in per_class) / n,
    )
    accuracy = cm.trace / total
    weighted = (
        sum(m.precision * m.support for m in per_class) / total,
        accuracy,
        sum(m.f1 * m.support for m in per_class) / total,
    )
    return ClassificationReport(
        classes=cm.classes,
        per_class=tuple(per_class),
        macro_avg=macro,
        weighted_avg=weighted,
        accuracy=accuracy,
    )


@dataclass(frozen=True)
class DetectionEvaluation:
    per_class_ap: Mapping[str, float]
    map: float
    recall: float
    iou_threshold: float

    def to_json_dict(self) -> dict:
        return {
            "per_class_ap": dict(self.per_class_ap),
            "map": self.map,
            "recall": self.recall,
            "iou_threshold": self.iou_threshold,
        }


def evaluate_detections(
    dets_by_image: Mapping[str, Sequence["Detection"]],
    gts_by_image: Mapping[str, Sequence[tuple[BoundingBox, str]]],
    classes: Sequence[str],
    iou_threshold: float = 0.5,
) -> DetectionEvaluation:
    """Pooled evaluation over an image set.

    Per class, detections from all images are ranked together by score while
    matching stays per image; AP comes from the pooled ranking and recall is
    the matched fraction of all ground truths (pooled over classes).
    """
    image_ids = sorted(set(dets_by_image) | set(gts_by_image))
    per_class_ap: dict[str, float] = {}
    total_tp = 0
    total_gt = 0
    for cls in classes:
        # Pool detections across images with provenance, rank globally.
        pooled: list[tuple[float, str, int]] = []
        matches: dict[str, MatchResult] = {}
        gts: dict[str, list[BoundingBox]] = {}
        for img in image_ids:
            cls_dets = [d for d in dets_by_image.get(img, []) if d.label == cls]
            cls_gts = [b for b, label in gts_by_image.get(img, []) if label == cls]
            gts[img] = cls_gts
            if cls_dets:
                matches[img] = match_detections(cls_dets, cls_gts, iou_threshold)
            for k, d in enumerate(cls_dets):
                pooled.append((d.score, img, k))
        n_gt = sum(len(v) for v in gts.values())
        total_gt += n_gt
        tp_flags = [
            matches[img].det_is_tp[k]
            for _, img, k in sorted(pooled, key=lambda t: -t[0])
        ]
        tp_total = sum(tp_flags)
        total_tp += tp_total
        if n_gt == 0:
            per_class_ap[cls] = 1.0 if not pooled else 0.0
            continue
        if not pooled:
            per_class_ap[cls] = 0.0
            continue
        tp = 0
        points = []
        for rank, flag in enumerate(tp_flags, start=1):
            if flag:
                tp += 1
            points.append((tp / n_gt, tp / rank))
        running = 0.0
        interp = [0.0] * len(points)
        for k in range(len(points) - 1, -1, -1):
            running = max(running, points[k][1])
            interp[k] = running
        ap = 0.0
        prev = 0.0
        for k, (recall, _) in enumerate(points):
            if recall > prev:
                ap += (recall - prev) * interp[k]
                prev = recall
        per_class_ap[cls] = ap

    return DetectionEvaluation(
        per_class_ap=per_class_ap,
        map=mean_average_precision(per_class_ap),
        recall=(total_tp / total_gt) if total_gt else 1.0,
        iou_threshold=iou_threshold,
    )
