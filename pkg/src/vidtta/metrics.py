"""Segmentation and temporal-consistency metrics (mIoU, wIoU, mVC_n).

IoU is pooled: intersections and unions are summed over every frame (and,
when aggregating, every clip) before dividing. mVC is averaged per video
first, then across videos.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MVC_WINDOWS = (8, 16)


def _check(preds, gts) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(preds), np.asarray(gts)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    return p, g


@dataclass
class ClassCounts:
    inter: np.ndarray  # (K,) int64
    pred: np.ndarray
    gt: np.ndarray

    @property
    def union(self) -> np.ndarray:
        return self.pred + self.gt - self.inter

    def __add__(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(self.inter + other.inter, self.pred + other.pred, self.gt + other.gt)


def class_counts(preds, gts, num_classes: int) -> ClassCounts:
    p, g = _check(preds, gts)
    p = p.ravel().astype(np.int64)
    g = g.ravel().astype(np.int64)
    K = num_classes
    return ClassCounts(
        inter=np.bincount(g[p == g], minlength=K)[:K],
        pred=np.bincount(p, minlength=K)[:K],
        gt=np.bincount(g, minlength=K)[:K],
    )


def per_class_iou(counts: ClassCounts) -> np.ndarray:
    """IoU per class; NaN where the class is absent from both maps."""
    u = counts.union
    return np.where(u > 0, counts.inter / np.maximum(u, 1), np.nan)


def miou_from_counts(counts: ClassCounts) -> float:
    iou = per_class_iou(counts)
    valid = ~np.isnan(iou)
    if not valid.any():
        return float("nan")
    return float(iou[valid].mean() * 100.0)


def wiou_from_counts(counts: ClassCounts) -> float:
    total = counts.gt.sum()
    if total == 0:
        return float("nan")
    iou = np.nan_to_num(per_class_iou(counts))
    return float((counts.gt / total * iou).sum() * 100.0)


def miou(preds, gts, num_classes: int) -> float:
    return miou_from_counts(class_counts(preds, gts, num_classes))


def wiou(preds, gts, num_classes: int) -> float:
    return wiou_from_counts(class_counts(preds, gts, num_classes))


def video_consistency(preds, gts, n: int) -> list[float]:
    """VC of every length-``n`` window whose GT-consistent region is nonempty."""
    p, g = _check(preds, gts)
    T = p.shape[0]
    if T < n:
        raise ValueError(f"clip of {T} frames is shorter than window {n}")
    out = []
    for s in range(T - n + 1):
        gt_stable = np.all(g[s : s + n] == g[s], axis=0)
        denom = gt_stable.sum()
        if denom == 0:
            continue
        pred_stable = np.all(p[s : s + n] == p[s], axis=0)
        out.append(float((gt_stable & pred_stable).sum() / denom))
    return out


def mvc(preds, gts, n: int) -> float:
    """Mean video consistency over sliding windows of ``n`` frames, in percent."""
    vcs = video_consistency(preds, gts, n)
    if not vcs:
        return float("nan")
    return float(np.mean(vcs) * 100.0)


@dataclass
class MetricsReport:
    miou: float
    wiou: float
    mvc: dict[int, float]
    per_class_iou: list[float | None]
    frame_count: int
    pixel_count: int
    counts: ClassCounts | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "wiou": self.wiou,
            "mvc": {str(k): v for k, v in self.mvc.items()},
            "per_class_iou": self.per_class_iou,
            "frame_count": self.frame_count,
            "pixel_count": self.pixel_count,
        }


def _report(counts: ClassCounts, mvcs: dict[int, float], frames: int) -> MetricsReport:
    iou = per_class_iou(counts)
    return MetricsReport(
        miou=miou_from_counts(counts),
        wiou=wiou_from_counts(counts),
        mvc=mvcs,
        per_class_iou=[None if np.isnan(v) else float(v) for v in iou],
        frame_count=frames,
        pixel_count=int(counts.gt.sum()),
        counts=counts,
    )


def evaluate_clip(preds, gts, num_classes: int, windows: Sequence[int] = MVC_WINDOWS) -> MetricsReport:
    p, g = _check(preds, gts)
    counts = class_counts(p, g, num_classes)
    mvcs = {n: mvc(p, g, n) for n in windows if p.shape[0] >= n}
    return _report(counts, mvcs, p.shape[0])


def aggregate(reports: Iterable[MetricsReport]) -> MetricsReport:
    """Pool IoU counts across clips; average per-clip mVC values across clips."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    counts = reports[0].counts
    for r in reports[1:]:
        counts = counts + r.counts
    mvcs: dict[int, float] = {}
    for n in sorted({n for r in reports for n in r.mvc}):
        vals = [r.mvc[n] for r in reports if n in r.mvc and not np.isnan(r.mvc[n])]
        mvcs[n] = float(np.mean(vals)) if vals else float("nan")
    return _report(counts, mvcs, sum(r.frame_count for r in reports))
