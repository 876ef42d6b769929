"""Segmentation metrics, activation-map plausibility and paired significance tests."""

import csv
import logging
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import Field, root_validator
from scipy import ndimage, stats

from .common import BaseModel
from .config import ThresholdRule
from .errors import ConfigurationError, DataError, DimensionError, UndefinedTestError
from .tensor import Tensor

logger = logging.getLogger(__name__)

# Largest number of non-zero differences for which the exact null distribution is used.
EXACT_WILCOXON_MAX_N = 20

OTSU_BINS = 256

METRIC_COLUMNS = ("dataset", "seed", "iou", "f1", "plausibility_iou", "params", "gflops")


class ConfusionCounts(BaseModel):
    tp: int = Field(..., ge=0)
    fp: int = Field(..., ge=0)
    fn: int = Field(..., ge=0)
    tn: int = Field(..., ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _binary(mask: Union[np.ndarray, Tensor]) -> np.ndarray:
    array = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    return array > 0.5


def confusion_counts(pred, gt) -> ConfusionCounts:
    pred, gt = _binary(pred), _binary(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"Mask shapes differ: {pred.shape} vs {gt.shape}")
    return ConfusionCounts(
        tp=int(np.sum(pred & gt)),
        fp=int(np.sum(pred & ~gt)),
        fn=int(np.sum(~pred & gt)),
        tn=int(np.sum(~pred & ~gt)),
    )


def iou(pred, gt) -> float:
    """tp / (tp + fp + fn); 1.0 when both masks are empty."""
    counts = confusion_counts(pred, gt)
    denominator = counts.tp + counts.fp + counts.fn
    return 1.0 if denominator == 0 else counts.tp / denominator


def f1(pred, gt) -> float:
    """2tp / (2tp + fp + fn); 1.0 when both masks are empty."""
    counts = confusion_counts(pred, gt)
    denominator = 2 * counts.tp + counts.fp + counts.fn
    return 1.0 if denominator == 0 else 2 * counts.tp / denominator


# Interpretability


def resize_bilinear(array: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if array.shape == tuple(shape):
        return array.astype(np.float64)
    factors = (shape[0] / array.shape[0], shape[1] / array.shape[1])
    resized = ndimage.zoom(array.astype(np.float64), factors, order=1, mode="nearest")
    if resized.shape != tuple(shape):
        raise DimensionError(f"Cannot resize {array.shape} to {tuple(shape)}")
    return resized


def activation_map(features: Union[np.ndarray, Tensor], shape: Tuple[int, int]) -> np.ndarray:
    """Mean absolute activation over channels, upsampled to `shape`.

    Accepts C x h x w or 1 x C x h x w features.
    """
    array = features.data if isinstance(features, Tensor) else np.asarray(features)
    if array.ndim == 4:
        if array.shape[0] != 1:
            raise DimensionError(f"activation_map takes one sample, got batch {array.shape}")
        array = array[0]
    if array.ndim != 3:
        raise DimensionError(f"Expected C x h x w features, got {array.shape}")
    return resize_bilinear(np.abs(array).mean(axis=0), shape)


def otsu_threshold(values: np.ndarray) -> float:
    """Threshold maximizing between-class variance over a histogram of `values`."""
    low, high = float(values.min()), float(values.max())
    if low == high:
        return low
    hist, edges = np.histogram(values, bins=OTSU_BINS, range=(low, high))
    centers = (edges[:-1] + edges[1:]) / 2
    weight_bg = np.cumsum(hist)[:-1]
    weight_fg = values.size - weight_bg
    sum_bg = np.cumsum(hist * centers)[:-1]
    mean_bg = sum_bg / weight_bg.clip(min=1)
    mean_fg = (np.sum(hist * centers) - sum_bg) / weight_fg.clip(min=1)
    between = weight_bg * weight_fg * (mean_bg - mean_fg) ** 2
    # Empty bins between two modes leave a flat maximum; split it down the middle.
    first = int(np.argmax(between))
    last = first
    while last + 1 < between.size and between[last + 1] == between[first]:
        last += 1
    return float((edges[first + 1] + edges[last + 1]) / 2)


def binarize(act: np.ndarray, rule: str = ThresholdRule.MEAN) -> np.ndarray:
    """Foreground where the map is at or above the rule's threshold.

    A constant map is entirely foreground under both rules.
    """
    rule = ThresholdRule(rule)
    if act.max() == act.min():
        return np.ones(act.shape, dtype=bool)
    if rule == ThresholdRule.MEAN:
        threshold = float(act.mean())
    else:
        threshold = otsu_threshold(act)
    return act >= threshold


def plausibility_iou(act, gt, threshold_rule: str = ThresholdRule.MEAN) -> float:
    act = act.data if isinstance(act, Tensor) else np.asarray(act, dtype=np.float64)
    gt = _binary(gt)
    if act.size == 0:
        raise DataError("Activation map is empty")
    if act.ndim != 2:
        raise DimensionError(f"Activation map must be H x W, got {act.shape}")
    if act.max() == act.min():
        # interpolation may perturb a constant map by an ulp
        return iou(np.ones(gt.shape, dtype=bool), gt)
    act = resize_bilinear(act, gt.shape)
    return iou(binarize(act, threshold_rule), gt)


# Significance


class PairedScores(BaseModel):
    """Aligned (score_a, score_b) pairs, one per (dataset, run)."""

    pairs: List[Tuple[float, float]] = Field(..., min_items=1)

    @classmethod
    def from_columns(cls, a: Sequence[float], b: Sequence[float]) -> "PairedScores":
        if len(a) != len(b):
            raise DimensionError(f"Score columns differ in length: {len(a)} vs {len(b)}")
        return cls(pairs=list(zip(a, b)))

    @property
    def differences(self) -> np.ndarray:
        return np.array([a - b for a, b in self.pairs], dtype=np.float64)


class WilcoxonResult(NamedTuple):
    statistic: float
    pvalue: float
    n: int
    exact: bool


def _exact_upper_tail(doubled_ranks: np.ndarray, doubled_statistic: int) -> float:
    """P(W+ >= W) over all 2**n equally likely sign assignments.

    Ranks are doubled so midranks become integers; the distribution of
    the doubled rank sum is built one rank at a time.
    """
    counts = np.zeros(int(doubled_ranks.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for rank in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[rank:] = counts[: len(counts) - rank]
        counts = counts + shifted
    return float(counts[doubled_statistic:].sum()) / float(2 ** len(doubled_ranks))


def wilcoxon_one_sided(pairs: PairedScores) -> WilcoxonResult:
    """Signed-rank test of H1: score_a tends to exceed score_b.

    Zero differences are dropped; tied magnitudes get midranks. The
    statistic is the sum of ranks of positive differences.
    """
    differences = pairs.differences
    differences = differences[differences != 0]
    n = len(differences)
    if n == 0:
        raise UndefinedTestError("All paired differences are zero")

    ranks = stats.rankdata(np.abs(differences))
    statistic = float(ranks[differences > 0].sum())

    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        pvalue = _exact_upper_tail(doubled, int(round(2 * statistic)))
        return WilcoxonResult(statistic, pvalue, n, True)

    _, tie_counts = np.unique(ranks, return_counts=True)
    mean = n * (n + 1) / 4
    var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(tie_counts ** 3 - tie_counts) / 48
    z = (statistic - mean - 0.5) / np.sqrt(var)
    return WilcoxonResult(statistic, float(stats.norm.sf(z)), n, False)


# Reports


class MetricRow(BaseModel):
    """One MetricReport line: a single sample or a dataset aggregate."""

    dataset: str
    seed: int
    iou: float = Field(..., ge=0, le=1)
    f1: float = Field(..., ge=0, le=1)
    plausibility_iou: Optional[float] = Field(None, ge=0, le=1)
    params: int = Field(..., ge=0)
    gflops: float = Field(..., ge=0)

    @root_validator(skip_on_failure=True)
    @classmethod
    def validate_order(cls, values: dict) -> dict:
        if values["iou"] > values["f1"] + 1e-12:
            raise ValueError("iou cannot exceed f1")
        return values


def aggregate_rows(rows: Sequence[MetricRow], dataset: str) -> MetricRow:
    if not rows:
        raise DataError("Cannot aggregate an empty metric report")
    plausibility = [row.plausibility_iou for row in rows if row.plausibility_iou is not None]
    return MetricRow(
        dataset=dataset,
        seed=rows[0].seed,
        iou=float(np.mean([row.iou for row in rows])),
        f1=float(np.mean([row.f1 for row in rows])),
        plausibility_iou=float(np.mean(plausibility)) if plausibility else None,
        params=rows[0].params,
        gflops=rows[0].gflops,
    )


def report_columns(explain: bool) -> List[str]:
    if explain:
        return list(METRIC_COLUMNS)
    return [column for column in METRIC_COLUMNS if column != "plausibility_iou"]


def write_metric_report(path: str, rows: Iterable[MetricRow], explain: bool = False) -> None:
    columns = report_columns(explain)
    with open(path, "w", newline="", encoding="utf8") as fp:
        writer = csv.DictWriter(fp, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            record = row.dict()
            if explain and record["plausibility_iou"] is None:
                raise ConfigurationError(f"Row {row.dataset} lacks plausibility_iou")
            writer.writerow(record)
