"""Overall IoU, Prec@X and the size-bucketed evaluation report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PREC_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
BUCKETS = ("small", "medium", "big")
SMALL_MAX = 0.05
MEDIUM_MAX = 0.10


def _check_binary(*masks: np.ndarray) -> None:
    for m in masks:
        if not np.isin(m, (0, 1)).all():
            raise ValueError("masks must be binary (0/1)")


def sample_iou(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, float]:
    """``(intersection, union, iou)`` pixel counts for one sample."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    _check_binary(pred, gt)
    p, g = pred.astype(bool), gt.astype(bool)
    inter = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero(p | g))
    return inter, union, (inter / union if union else 0.0)


def overall_iou(counts: Iterable[tuple[int, int]]) -> float:
    """Summed intersections over summed unions (not the mean of per-sample IoUs)."""
    counts = list(counts)
    if not counts:
        raise ValueError("overall IoU of an empty set is undefined")
    total_i = sum(i for i, _ in counts)
    total_u = sum(u for _, u in counts)
    return total_i / total_u if total_u else 0.0


def prec_at_x(ious: Sequence[float], x: float) -> float:
    """Fraction of samples with IoU >= x (inclusive)."""
    if len(ious) == 0:
        raise ValueError("Prec@X of an empty set is undefined")
    if not 0.0 < x < 1.0:
        raise ValueError("x must lie in (0, 1)")
    return float(np.count_nonzero(np.asarray(ious, dtype=np.float64) >= x)) / len(ious)


def size_bucket(gt: np.ndarray, image_area: int | None = None) -> str:
    """small: area < 5%; medium: [5%, 10%); big: >= 10%."""
    gt = np.asarray(gt)
    _check_binary(gt)
    area = int(np.count_nonzero(gt))
    if area == 0:
        raise ValueError("empty mask has no size bucket")
    frac = area / (image_area if image_area is not None else gt.size)
    if frac < SMALL_MAX:
        return "small"
    if frac < MEDIUM_MAX:
        return "medium"
    return "big"


@dataclass
class EvalReport:
    n: int
    overall_iou: float | None
    prec: dict[float, float | None]
    mean_iou: float | None
    buckets: dict[str, "EvalReport"] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, counts: Sequence[tuple[int, int]], labels: Sequence[str] | None = None) -> "EvalReport":
        report = cls._summarise(counts)
        if labels is not None:
            for b in BUCKETS:
                sub = [c for c, lab in zip(counts, labels) if lab == b]
                report.buckets[b] = cls._summarise(sub)
            report.buckets["all"] = cls._summarise(counts)
        return report

    @classmethod
    def _summarise(cls, counts: Sequence[tuple[int, int]]) -> "EvalReport":
        if not counts:
            return cls(0, None, {x: None for x in PREC_THRESHOLDS}, None)
        ious = [i / u if u else 0.0 for i, u in counts]
        return cls(
            n=len(counts),
            overall_iou=overall_iou(counts),
            prec={x: prec_at_x(ious, x) for x in PREC_THRESHOLDS},
            mean_iou=float(np.mean(ious)),
        )

    def to_dict(self) -> dict:
        d = {
            "n": self.n,
            "overall_iou": self.overall_iou,
            "mean_iou": self.mean_iou,
            "prec": {f"{x:.1f}": v for x, v in self.prec.items()},
        }
        if self.buckets:
            d["buckets"] = {k: v.to_dict() for k, v in self.buckets.items()}
        return d

    def to_text(self) -> str:
        """Table (one row per bucket) followed by a ``key=value`` block."""

        def fmt(v):
            return "   -  " if v is None else f"{100 * v:6.2f}"

        header = "bucket      n  " + "  ".join(f"P@{x:.1f}" for x in PREC_THRESHOLDS) + "  oIoU    mIoU"
        rows = [header]
        for name, rep in self._rows():
            rows.append(
                f"{name:<8}{rep.n:5d}  "
                + "  ".join(fmt(rep.prec[x]) for x in PREC_THRESHOLDS)
                + f"  {fmt(rep.overall_iou)}  {fmt(rep.mean_iou)}"
            )
        kv = []
        for name, rep in self._rows():
            kv.append(f"{name}.n={rep.n}")
            kv.append(f"{name}.overall_iou={_kv(rep.overall_iou)}")
            kv.append(f"{name}.mean_iou={_kv(rep.mean_iou)}")
            kv.extend(f"{name}.prec@{x:.1f}={_kv(rep.prec[x])}" for x in PREC_THRESHOLDS)
        return "\n".join(rows) + "\n\n[metrics]\n" + "\n".join(kv) + "\n"

    def _rows(self):
        if not self.buckets:
            return [("all", self)]
        return [(b, self.buckets[b]) for b in ("all", *BUCKETS)]

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _kv(v: float | None) -> str:
    return "nan" if v is None else repr(float(v))


def evaluate_masks(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> EvalReport:
    """Report over paired predicted / ground-truth masks, split by the
    ground-truth size bucket.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth masks")
    counts, labels = [], []
    for p, g in zip(preds, gts):
        i, u, _ = sample_iou(p, g)
        counts.append((i, u))
        labels.append(size_bucket(g))
    return EvalReport.from_counts(counts, labels)
