"""
Referring-segmentation metrics: per-sample IoU, Overall IoU (accumulated
intersection over accumulated union), Mean IoU, Precision@X and AP over
X in 0.50:0.05:0.95.
"""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import DataValidationError, DimensionError
from models import EvalReport, SampleScore, SizeBucket

PRECISION_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
AP_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
# "IoU higher than the threshold": strict comparison. Flip to False for >=.
STRICT_THRESHOLD = True

# Ground-truth area as a fraction of the frame.
SMALL_ACTOR_FRACTION = 0.02
LARGE_ACTOR_FRACTION = 0.05


def _binary(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise DataValidationError(f"{name} mask must be binary")
    return mask.astype(bool)


def counts(pred: np.ndarray, gt: np.ndarray) -> Tuple[int, int]:
    """(intersection, union) pixel counts."""
    if np.shape(pred) != np.shape(gt):
        raise DimensionError(f"prediction {np.shape(pred)} and ground truth {np.shape(gt)} differ in shape")
    p, g = _binary(pred, "prediction"), _binary(gt, "ground-truth")
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p | g))


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    intersection, union = counts(pred, gt)
    return 1.0 if union == 0 else intersection / union


def _passes(value: float, threshold: float) -> bool:
    return value > threshold if STRICT_THRESHOLD else value >= threshold


def precision_at(ious: Sequence[float], threshold: float) -> float:
    return sum(1 for v in ious if _passes(v, threshold)) / len(ious)


def _pooled(scores: Sequence[SampleScore]) -> Tuple[float, float]:
    unions = sum(s.union for s in scores)
    overall = 1.0 if unions == 0 else sum(s.intersection for s in scores) / unions
    return overall, sum(s.iou for s in scores) / len(scores)


def _size_breakdown(scores: Sequence[SampleScore], frame_area: int) -> Dict[str, SizeBucket]:
    buckets: Dict[str, List[SampleScore]] = {"small": [], "medium": [], "large": []}
    for score in scores:
        fraction = score.gt_area / frame_area
        if fraction < SMALL_ACTOR_FRACTION:
            buckets["small"].append(score)
        elif fraction > LARGE_ACTOR_FRACTION:
            buckets["large"].append(score)
        else:
            buckets["medium"].append(score)
    breakdown = {}
    for name, members in buckets.items():
        if members:
            overall, mean = _pooled(members)
            breakdown[name] = SizeBucket(count=len(members), overall_iou=overall, mean_iou=mean)
        else:
            breakdown[name] = SizeBucket(count=0)
    return breakdown


def aggregate(samples: Sequence[Tuple[np.ndarray, np.ndarray]], ids: Optional[Sequence[str]] = None) -> EvalReport:
    if not samples:
        raise DataValidationError("cannot aggregate an empty sample list")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(samples))]
    scores = []
    for sample_id, (pred, gt) in zip(ids, samples):
        intersection, union = counts(pred, gt)
        scores.append(SampleScore(sample_id=sample_id, intersection=intersection, union=union,
                                  iou=1.0 if union == 0 else intersection / union,
                                  gt_area=int(np.count_nonzero(gt))))
    ious = [s.iou for s in scores]
    overall, mean = _pooled(scores)
    ap_curve = [precision_at(ious, x) for x in AP_THRESHOLDS]
    return EvalReport(
        samples=scores,
        overall_iou=overall,
        mean_iou=mean,
        precision_at={f"{x:.1f}": precision_at(ious, x) for x in PRECISION_THRESHOLDS},
        ap=sum(ap_curve) / len(ap_curve),
        size_breakdown=_size_breakdown(scores, int(np.size(samples[0][1]))),
    )


def render_table(report: EvalReport, title: str = "") -> str:
    """Aligned plain-text table in percent, columns as in the usual results tables."""
    headers = [f"P@{k}" for k in report.precision_at] + ["AP", "Overall", "Mean"]
    values = list(report.precision_at.values()) + [report.ap, report.overall_iou, report.mean_iou]
    cells = [f"{100 * v:.1f}" for v in values]
    widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
    lines = [title] if title else []
    lines.append("  ".join(h.rjust(w) for h, w in zip(headers, widths)))
    lines.append("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    lines.append(f"samples: {len(report.samples)}")
    return "\n".join(lines)


def render_key_values(report: EvalReport) -> str:
    lines = [
        f"samples={len(report.samples)}",
        f"overall_iou={report.overall_iou!r}",
        f"mean_iou={report.mean_iou!r}",
    ]
    lines += [f"p_at_{k}={v!r}" for k, v in report.precision_at.items()]
    lines.append(f"ap={report.ap!r}")
    for name, bucket in report.size_breakdown.items():
        lines.append(f"{name}_count={bucket.count}")
        if bucket.count:
            lines.append(f"{name}_overall_iou={bucket.overall_iou!r}")
            lines.append(f"{name}_mean_iou={bucket.mean_iou!r}")
    return "\n".join(lines)
