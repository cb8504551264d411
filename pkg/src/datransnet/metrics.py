"""Pixel-level (mIoU, F1) and target-level (Pd, Fa) detection metrics, and ROC sweeps.

Pixel counts are micro-averaged: one confusion matrix over the whole set.
Target matching works on 8-connected components. A ground-truth target
counts as detected when some predicted component overlaps it or has its
centroid within ``match_radius`` pixels of the target's centroid. Predicted
components that match no target contribute all their pixels to Fa.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .tensor import DimensionError, Tensor

_EIGHT = np.ones((3, 3), dtype=int)


def _plane(x) -> np.ndarray:
    a = np.asarray(x.data if isinstance(x, Tensor) else x)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise DimensionError(f"expected an (h, w) or (1, h, w) map, got {a.shape}")
    return a


def connected_components(mask) -> tuple[np.ndarray, int]:
    """8-connected labelling; labels 1..k in order of first pixel in raster scan."""
    labels, count = ndimage.label(_plane(mask) > 0, structure=_EIGHT)
    return labels, int(count)


@dataclass
class PixelConfusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def from_masks(cls, pred, gt) -> "PixelConfusion":
        p = np.asarray(pred.data if isinstance(pred, Tensor) else pred) > 0
        g = np.asarray(gt.data if isinstance(gt, Tensor) else gt) > 0
        if p.shape != g.shape:
            raise DimensionError(f"prediction {p.shape} and ground truth {g.shape} differ")
        tp = int(np.count_nonzero(p & g))
        fp = int(np.count_nonzero(p & ~g))
        fn = int(np.count_nonzero(~p & g))
        return cls(tp, fp, fn, p.size - tp - fp - fn)

    def __add__(self, other: "PixelConfusion") -> "PixelConfusion":
        return PixelConfusion(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class PixelMetrics:
    miou: float
    f1: float
    precision: float
    recall: float
    defined: bool  # False when there were no positives in prediction or truth


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def pixel_metrics(acc: PixelConfusion) -> PixelMetrics:
    return PixelMetrics(
        miou=_ratio(acc.tp, acc.tp + acc.fp + acc.fn),
        f1=_ratio(2 * acc.tp, 2 * acc.tp + acc.fp + acc.fn),
        precision=_ratio(acc.tp, acc.tp + acc.fp),
        recall=_ratio(acc.tp, acc.tp + acc.fn),
        defined=acc.tp + acc.fp + acc.fn > 0,
    )


@dataclass
class TargetMatchReport:
    gt_targets: int = 0
    detected: int = 0
    false_alarm_pixels: int = 0
    total_pixels: int = 0
    pred_targets: int = 0
    unmatched_pred: int = 0

    def __add__(self, other: "TargetMatchReport") -> "TargetMatchReport":
        return TargetMatchReport(
            *(getattr(self, f) + getattr(other, f) for f in self.__dataclass_fields__)
        )

    @property
    def missed(self) -> int:
        return self.gt_targets - self.detected

    @property
    def pd(self) -> float:
        return _ratio(self.detected, self.gt_targets)

    @property
    def fa(self) -> float:
        return _ratio(self.false_alarm_pixels, self.total_pixels)


def _centroids(labels: np.ndarray, count: int) -> np.ndarray:
    if count == 0:
        return np.zeros((0, 2))
    return np.asarray(ndimage.center_of_mass(np.ones(labels.shape), labels, range(1, count + 1)))


def match_matrix(pred_labels, n_pred, gt_labels, n_gt, match_radius: float) -> np.ndarray:
    """Boolean (n_gt, n_pred): overlap or centroid distance <= radius."""
    m = np.zeros((n_gt, n_pred), dtype=bool)
    if n_gt == 0 or n_pred == 0:
        return m
    both = (gt_labels > 0) & (pred_labels > 0)
    m[gt_labels[both] - 1, pred_labels[both] - 1] = True
    cg, cp = _centroids(gt_labels, n_gt), _centroids(pred_labels, n_pred)
    dist = np.sqrt(((cg[:, None, :] - cp[None, :, :]) ** 2).sum(-1))
    return m | (dist <= match_radius)


def target_metrics(pred, gt, match_radius: float = 3.0) -> TargetMatchReport:
    p, g = _plane(pred) > 0, _plane(gt) > 0
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} and ground truth {g.shape} differ")
    pl, n_pred = connected_components(p)
    gl, n_gt = connected_components(g)
    m = match_matrix(pl, n_pred, gl, n_gt, match_radius)
    unmatched = ~m.any(axis=0)
    sizes = np.bincount(pl.ravel(), minlength=n_pred + 1)[1:]
    return TargetMatchReport(
        gt_targets=n_gt,
        detected=int(m.any(axis=1).sum()),
        false_alarm_pixels=int(sizes[unmatched].sum()),
        total_pixels=int(p.size),
        pred_targets=n_pred,
        unmatched_pred=int(unmatched.sum()),
    )


@dataclass(frozen=True)
class EvalSummary:
    miou: float
    f1: float
    precision: float
    recall: float
    pd: float
    fa: float
    confusion: PixelConfusion
    targets: TargetMatchReport


def evaluate(
    prob_maps: Sequence, gt_masks: Sequence, threshold: float = 0.5, match_radius: float = 3.0,
    per_image_miou: bool = False,
) -> EvalSummary:
    """Binarise at ``p > threshold`` and accumulate pixel and target statistics over the set.

    ``per_image_miou`` switches mIoU to the mean of per-image IoUs (images
    with nothing predicted and nothing true are skipped).
    """
    conf, rep, ious = PixelConfusion(), TargetMatchReport(), []
    for prob, gt in zip(prob_maps, gt_masks):
        pred = _plane(prob) > threshold
        g = _plane(gt) > 0.5
        c = PixelConfusion.from_masks(pred, g)
        conf = conf + c
        rep = rep + target_metrics(pred, g, match_radius)
        if c.tp + c.fp + c.fn:
            ious.append(c.tp / (c.tp + c.fp + c.fn))
    pm = pixel_metrics(conf)
    miou = float(np.mean(ious)) if per_image_miou and ious else pm.miou
    return EvalSummary(miou, pm.f1, pm.precision, pm.recall, rep.pd, rep.fa, conf, rep)


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending, inside (0, 1)
    pd: np.ndarray
    fa: np.ndarray

    def to_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("threshold", "pd", "fa"))
            for t, d, f in zip(self.thresholds, self.pd, self.fa):
                w.writerow((repr(float(t)), repr(float(d)), repr(float(f))))

    @classmethod
    def from_csv(cls, path: Path) -> "RocCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
        return cls(col("threshold"), col("pd"), col("fa"))


def roc_thresholds(n_thresholds: int) -> np.ndarray:
    """``n`` equally spaced thresholds strictly inside (0, 1), descending."""
    if n_thresholds < 1:
        raise ValueError("need at least one threshold")
    return 1.0 - np.arange(1, n_thresholds + 1) / (n_thresholds + 1)


def roc(prob_maps: Sequence, gt_masks: Sequence, n_thresholds: int = 50, match_radius: float = 3.0) -> RocCurve:
    thresholds = roc_thresholds(n_thresholds)
    gts = [_plane(g) > 0.5 for g in gt_masks]
    probs = [_plane(p) for p in prob_maps]
    pd, fa = [], []
    for t in thresholds:
        rep = TargetMatchReport()
        for p, g in zip(probs, gts):
            rep = rep + target_metrics(p > t, g, match_radius)
        pd.append(rep.pd)
        fa.append(rep.fa)
    return RocCurve(thresholds, np.array(pd), np.array(fa))
