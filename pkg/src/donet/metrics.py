"""Binarization, confusion counts and the five overlap metrics.

Empty-mask conventions: when prediction and ground truth are both empty
every ratio is 1; when exactly one is empty DSC and JI are 0 and an
undefined recall or precision is reported as 0.
"""

import csv
import io
from dataclasses import astuple, dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor

METRIC_NAMES = ("dsc", "ji", "recall", "precision", "accuracy")
CSV_HEADER = ("image",) + METRIC_NAMES


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class SegmentationMetrics:
    dsc: float
    ji: float
    recall: float
    precision: float
    accuracy: float

    def as_tuple(self):
        return astuple(self)


def _array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def binarize(yhat, threshold=0.5):
    """1 where the probability is strictly above ``threshold``."""
    p = _array(yhat)
    if p.size and (np.isnan(p).any() or p.min() < 0 or p.max() > 1):
        raise ContractError("probabilities must lie in [0, 1]")
    return (p > threshold).astype(np.uint8)


def confusion(sr, gt):
    sr, gt = _array(sr), _array(gt)
    if sr.shape != gt.shape:
        raise ShapeError(f"prediction {sr.shape} and ground truth {gt.shape} differ")
    for name, m in (("prediction", sr), ("ground truth", gt)):
        if not np.all((m == 0) | (m == 1)):
            raise ContractError(f"{name} mask must be binary")
    s = sr.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(s & g))
    fp = int(np.count_nonzero(s & ~g))
    fn = int(np.count_nonzero(~s & g))
    tn = int(s.size - tp - fp - fn)
    return ConfusionCounts(tp, tn, fp, fn)


def metrics_from_counts(c):
    if c.tp + c.fp + c.fn == 0:
        return SegmentationMetrics(1.0, 1.0, 1.0, 1.0, 1.0 if c.total else 0.0)
    dsc = 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    ji = c.tp / (c.tp + c.fp + c.fn)
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    accuracy = (c.tp + c.tn) / c.total
    return SegmentationMetrics(dsc, ji, recall, precision, accuracy)


def compute_metrics(sr, gt):
    counts = confusion(sr, gt)
    return counts, metrics_from_counts(counts)


def aggregate(rows):
    """Macro-average: per-metric mean and population std over images."""
    arr = np.array([r.as_tuple() for r in rows], dtype=np.float64)
    if arr.size == 0:
        nan = (float("nan"),) * len(METRIC_NAMES)
        return SegmentationMetrics(*nan), SegmentationMetrics(*nan)
    return SegmentationMetrics(*arr.mean(axis=0)), SegmentationMetrics(*arr.std(axis=0))


def metrics_csv(named_rows):
    """Render ``[(image_id, SegmentationMetrics), ...]`` plus MEAN and STD rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for name, m in named_rows:
        writer.writerow([name] + [f"{v:.6f}" for v in m.as_tuple()])
    mean, std = aggregate([m for _, m in named_rows])
    writer.writerow(["MEAN"] + [f"{v:.6f}" for v in mean.as_tuple()])
    writer.writerow(["STD"] + [f"{v:.6f}" for v in std.as_tuple()])
    return buf.getvalue()
