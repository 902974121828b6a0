"""Evaluation metrics: AUROC, average precision, F1-max, AUPRO, and their mean.

All four ranking metrics depend only on the ordering of the scores; ties get
half credit in AUROC and are grouped into single thresholds elsewhere.
Pixel-level metrics pool every test pixel of a class; dataset-level numbers
average the per-class results.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import MetricUndefinedError, ParameterError

DEFAULT_FPR_LIMIT = 0.3

IMAGE_METRIC_NAMES = ("auroc", "ap", "f1max")
PIXEL_METRIC_NAMES = ("auroc", "ap", "f1max", "aupro")

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _as_score_label_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise ParameterError(f"scores shape {s.shape} != labels shape {y.shape}")
    if s.size == 0:
        raise MetricUndefinedError("empty inputs")
    return s, y


def auroc(scores, labels) -> float:
    """Probability a positive outranks a negative, ties counted half.

    Computed via midranks (Mann-Whitney); requires both classes present.
    """
    s, y = _as_score_label_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("auroc needs both classes present")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _threshold_counts(s: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (tp, fp) after admitting each distinct score, descending."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    # last index of each tie group marks one distinct threshold
    distinct = np.nonzero(np.diff(s_sorted))[0]
    idx = np.r_[distinct, s_sorted.size - 1]
    tp = np.cumsum(y_sorted)[idx]
    fp = np.cumsum(1 - y_sorted)[idx]
    return tp.astype(np.float64), fp.astype(np.float64)


def average_precision(scores, labels) -> float:
    """Area under the precision-recall step curve (precision at each recall rise)."""
    s, y = _as_score_label_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricUndefinedError("average precision needs at least one positive")
    tp, fp = _threshold_counts(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    deltas = np.diff(np.r_[0.0, recall])
    return float((deltas * precision).sum())


def f1_max(scores, labels) -> float:
    """Maximum F1 over thresholds at the distinct score values (>= admits)."""
    s, y = _as_score_label_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricUndefinedError("f1-max needs at least one positive")
    tp, fp = _threshold_counts(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    denom = precision + recall
    f1 = np.where(denom > 0, 2.0 * precision * recall / np.maximum(denom, 1e-300), 0.0)
    return float(f1.max())


def aupro(maps, gts, fpr_limit: float = DEFAULT_FPR_LIMIT) -> float:
    """Area under the per-region-overlap curve up to ``fpr_limit``, normalized.

    Convention: thresholds sweep the distinct score values in descending
    order, a pixel is predicted anomalous when its score is strictly above
    the threshold, regions are 8-connected components of the ground truth,
    overlap is averaged over regions, and the (FPR, PRO) polyline -- extended
    flat from its last point -- is integrated trapezoidally over
    ``[0, fpr_limit]`` and divided by ``fpr_limit``.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise ParameterError(f"fpr_limit {fpr_limit} outside (0, 1]")
    if len(maps) != len(gts):
        raise ParameterError("maps and ground-truth lists differ in length")

    region_ids = []  # per pixel: index of its region, or -1 for negatives
    all_scores = []
    region_sizes = []
    next_region = 0
    for score_map, gt in zip(maps, gts):
        score_map = np.asarray(score_map, dtype=np.float64)
        gt = np.asarray(gt)
        if score_map.shape != gt.shape:
            raise ParameterError("score map and mask shapes differ")
        labels, count = ndimage.label(gt > 0, structure=_EIGHT_CONNECTED)
        ids = np.where(labels > 0, labels + next_region - 1, -1)
        region_sizes.extend(np.bincount(labels.ravel(), minlength=count + 1)[1:].tolist())
        next_region += count
        region_ids.append(ids.ravel())
        all_scores.append(score_map.ravel())
    if next_region == 0:
        raise MetricUndefinedError("aupro needs at least one anomalous region")

    scores = np.concatenate(all_scores)
    ids = np.concatenate(region_ids)
    n_neg = int((ids < 0).sum())
    if n_neg == 0:
        raise MetricUndefinedError("aupro needs at least one normal pixel")
    sizes = np.asarray(region_sizes, dtype=np.float64)

    order = np.argsort(-scores, kind="mergesort")
    s_sorted = scores[order]
    ids_sorted = ids[order]
    # 0-based distinct-value group per sorted pixel
    group_idx = np.cumsum(np.r_[0, (np.diff(s_sorted) != 0).astype(np.int64)])
    n_groups = int(group_idx[-1]) + 1

    positive = ids_sorted >= 0
    weights = np.zeros(s_sorted.size, dtype=np.float64)
    weights[positive] = 1.0 / (sizes[ids_sorted[positive]] * next_region)
    pro_cum = np.cumsum(np.bincount(group_idx, weights=weights, minlength=n_groups))
    neg_cum = np.cumsum(np.bincount(group_idx[~positive], minlength=n_groups))

    # strictly-above binarization: threshold = k-th distinct value admits groups < k
    fprs = np.r_[0.0, neg_cum[:-1] / n_neg]
    pros = np.r_[0.0, pro_cum[:-1]]
    return _integrate_pro_curve(fprs, pros, fpr_limit)


def _integrate_pro_curve(fprs: np.ndarray, pros: np.ndarray, fpr_limit: float) -> float:
    # collapse duplicate FPR values to their best (= latest) PRO
    keep = np.r_[fprs[1:] != fprs[:-1], True]
    fprs, pros = fprs[keep], pros[keep]

    if fprs[-1] < fpr_limit:
        fprs = np.r_[fprs, fpr_limit]
        pros = np.r_[pros, pros[-1]]
    else:
        inside = fprs <= fpr_limit
        boundary_pro = float(np.interp(fpr_limit, fprs, pros))
        fprs = np.r_[fprs[inside], fpr_limit]
        pros = np.r_[pros[inside], boundary_pro]
    return float(np.trapezoid(pros, fprs) / fpr_limit)


def mad_summary(metrics: dict) -> float:
    """Arithmetic mean of the seven image- and pixel-level metrics."""
    values = []
    for level, names in (("image", IMAGE_METRIC_NAMES), ("pixel", PIXEL_METRIC_NAMES)):
        section = metrics.get(level)
        if section is None:
            raise ParameterError(f"missing {level!r} section")
        for name in names:
            if name not in section:
                raise ParameterError(f"missing metric {level}.{name}")
            values.append(float(section[name]))
    return float(np.mean(values))


@dataclasses.dataclass
class ClassMetrics:
    """The seven metrics of one class (or of a per-class average)."""

    image: dict[str, float]
    pixel: dict[str, float]

    @property
    def mad(self) -> float:
        return mad_summary({"image": self.image, "pixel": self.pixel})

    def to_dict(self) -> dict:
        return {"image": dict(self.image), "pixel": dict(self.pixel), "mad": self.mad}


@dataclasses.dataclass
class MetricsReport:
    """Per-class metrics plus their across-class mean."""

    per_class: dict[str, ClassMetrics]
    mean: ClassMetrics

    def to_dict(self) -> dict:
        return {
            "per_class": {name: m.to_dict() for name, m in self.per_class.items()},
            "mean": self.mean.to_dict(),
            "mad": self.mean.mad,
        }


def compute_class_metrics(
    image_scores,
    image_labels,
    pixel_maps,
    pixel_gts,
    fpr_limit: float = DEFAULT_FPR_LIMIT,
) -> ClassMetrics:
    """Image metrics over the class's images, pixel metrics over its pooled pixels."""
    image = {
        "auroc": auroc(image_scores, image_labels),
        "ap": average_precision(image_scores, image_labels),
        "f1max": f1_max(image_scores, image_labels),
    }
    flat_scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in pixel_maps])
    flat_labels = np.concatenate([(np.asarray(g) > 0).astype(np.int64).ravel() for g in pixel_gts])
    pixel = {
        "auroc": auroc(flat_scores, flat_labels),
        "ap": average_precision(flat_scores, flat_labels),
        "f1max": f1_max(flat_scores, flat_labels),
        "aupro": aupro(pixel_maps, pixel_gts, fpr_limit=fpr_limit),
    }
    return ClassMetrics(image=image, pixel=pixel)


def aggregate_report(per_class: dict[str, ClassMetrics]) -> MetricsReport:
    """Dataset-level numbers are the plain means of the per-class metrics."""
    if not per_class:
        raise ParameterError("no classes to aggregate")
    mean_image = {
        name: float(np.mean([m.image[name] for m in per_class.values()]))
        for name in IMAGE_METRIC_NAMES
    }
    mean_pixel = {
        name: float(np.mean([m.pixel[name] for m in per_class.values()]))
        for name in PIXEL_METRIC_NAMES
    }
    return MetricsReport(per_class=dict(per_class), mean=ClassMetrics(mean_image, mean_pixel))
