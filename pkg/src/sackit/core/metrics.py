import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .common import ParameterError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.5

# --- Types ---

@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel-level confusion counts; adding two counts pools them."""
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ParameterError(f"Confusion counts must be non-negative: {self}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricValues:
    precision: float
    recall: float
    f1: float
    iou: float

    def as_percent(self) -> Dict[str, float]:
        return {k: round(100.0 * v, 2) for k, v in self.__dict__.items()}


# --- Pixel Ops ---

def binarize(prob, tau: float = DEFAULT_TAU) -> np.ndarray:
    """1 where prob > tau (strict)."""
    if not 0.0 < tau < 1.0:
        raise ParameterError(f"Threshold tau must lie in (0, 1), got {tau}")
    return (np.asarray(prob) > tau).astype(np.uint8)


def confusion(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"Prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    return num / den if den > 0 else 0.0


def compute_metrics(c: ConfusionCounts) -> MetricValues:
    """
    Precision, recall, F1 and IoU from counts.

    Conventions: when prediction and ground truth are both empty (tp = fp = fn = 0)
    every metric is 1; otherwise a zero denominator yields 0.
    """
    if c.tp == 0 and c.fp == 0 and c.fn == 0:
        return MetricValues(1.0, 1.0, 1.0, 1.0)
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    # 2tp / (2tp + fp + fn) equals the harmonic mean and keeps F1 = 2 IoU / (1 + IoU) exact
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    iou = _ratio(c.tp, c.tp + c.fp + c.fn)
    return MetricValues(precision, recall, f1, iou)


# --- Accumulation ---

class MetricAccumulator:
    """
    Collects per-image confusion counts for one dataset.
    Micro mode pools counts before taking ratios; macro mode averages per-image metrics.
    """

    def __init__(self, macro: bool = False):
        self.macro = macro
        self.counts = ConfusionCounts()
        self.per_image: List[Tuple[str, ConfusionCounts]] = []

    def update(self, pred, gt, sample_id: str = "") -> ConfusionCounts:
        c = confusion(pred, gt)
        self.counts = self.counts + c
        self.per_image.append((sample_id, c))
        return c

    def compute(self) -> MetricValues:
        if not self.macro:
            return compute_metrics(self.counts)
        if not self.per_image:
            raise ParameterError("No images accumulated")
        values = [compute_metrics(c) for _, c in self.per_image]
        return MetricValues(*(float(np.mean([getattr(v, k) for v in values]))
                              for k in ("precision", "recall", "f1", "iou")))


def pool(counts: Iterable[ConfusionCounts]) -> ConfusionCounts:
    total = ConfusionCounts()
    for c in counts:
        total = total + c
    return total


# --- Cross-dataset aggregation ---

@dataclass
class Aggregate:
    rows: List[Tuple[str, MetricValues]]
    f1_mean: float
    f1_std: float
    iou_mean: float
    iou_std: float


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and population standard deviation (divide by n)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ParameterError("Cannot aggregate an empty list")
    return float(arr.mean()), float(arr.std(ddof=0))


def aggregate(values: Sequence[Tuple[str, MetricValues]]) -> Aggregate:
    """Per-dataset rows plus mean and population std of F1 and IoU across datasets."""
    rows = list(values)
    if not rows:
        raise ParameterError("aggregate needs at least one dataset")
    f1_mean, f1_std = mean_std([v.f1 for _, v in rows])
    iou_mean, iou_std = mean_std([v.iou for _, v in rows])
    return Aggregate(rows, f1_mean, f1_std, iou_mean, iou_std)
