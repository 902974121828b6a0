"""Final anomaly scores: fuse the feature-gap map with the segmentation map.

The per-token discrepancy map is upsampled to input resolution, combined with
the segmentation prediction as ``lambda1 * gap + lambda2 * seg``, and the
image-level score is the mean of the map's top-T values.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
from torch.nn import functional as F

from .backbone import Backbone
from .errors import ParameterError
from .repair_net import FeatureMask, RepairNet, discrepancy_map, group, make_feature_mask
from .segnet import similarity_feature

DEFAULT_LAMBDA1 = 0.7
DEFAULT_LAMBDA2 = 0.3

# Fraction of pixels averaged into the image score when no explicit top count
# is configured.
DEFAULT_TOP_FRACTION = 0.001


@dataclasses.dataclass
class ScoringConfig:
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2
    top_count: int | None = None
    fpr_limit: float = 0.3
    mask_seed: int = 2024


def default_top_count(num_pixels: int) -> int:
    return max(1, math.ceil(DEFAULT_TOP_FRACTION * num_pixels))


def upsample_bilinear(values: np.ndarray | torch.Tensor, size: int) -> np.ndarray:
    """Bilinear resize of a 2-D map to (size, size), half-pixel-aligned corners."""
    t = torch.as_tensor(np.asarray(values, dtype=np.float64))
    if t.ndim != 2:
        raise ParameterError(f"expected a 2-D map, got shape {tuple(t.shape)}")
    if t.shape == (size, size):
        return t.numpy()
    out = F.interpolate(t[None, None], size=(size, size), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def anomaly_map(
    gap_map: np.ndarray | torch.Tensor,
    seg_map: np.ndarray | torch.Tensor | None,
    lambda1: float = DEFAULT_LAMBDA1,
    lambda2: float = DEFAULT_LAMBDA2,
    target_size: int | None = None,
) -> np.ndarray:
    """Weighted sum of the upsampled feature-gap map and the segmentation map.

    ``seg_map`` is expected at the target resolution already; passing ``None``
    (or ``lambda2 = 0``) scores from the feature gap alone.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ParameterError("lambda weights must be non-negative")
    gap = np.asarray(gap_map, dtype=np.float64)
    if seg_map is not None:
        seg = np.asarray(seg_map, dtype=np.float64)
        size = seg.shape[-1] if target_size is None else target_size
    else:
        if target_size is None:
            raise ParameterError("target_size required when seg_map is None")
        size = target_size
        seg = np.zeros((size, size))
    if seg.shape != (size, size):
        raise ParameterError(f"segmentation map shape {seg.shape} != ({size}, {size})")
    return lambda1 * upsample_bilinear(gap, size) + lambda2 * seg


def image_score(score_map: np.ndarray, top_count: int) -> float:
    """Mean of the ``top_count`` largest values of the score map."""
    flat = np.asarray(score_map, dtype=np.float64).ravel()
    if not 1 <= top_count <= flat.size:
        raise ParameterError(f"top_count {top_count} outside [1, {flat.size}]")
    if top_count == flat.size:
        return float(flat.mean())
    top = np.partition(flat, flat.size - top_count)[flat.size - top_count :]
    return float(top.mean())


@dataclasses.dataclass
class ScoredImage:
    """Inference outputs of one image."""

    score_map: np.ndarray
    score: float
    gap_map: np.ndarray
    seg_map: np.ndarray | None


def score_images(
    encoder: Backbone,
    repair: RepairNet,
    seg_head,
    images: np.ndarray,
    sample_indices,
    config: ScoringConfig,
) -> list[ScoredImage]:
    """Run the inference path on a batch of preprocessed images.

    The feature mask of image ``i`` is drawn from a generator seeded with
    ``config.mask_seed + sample_indices[i]`` so results do not depend on how
    the test set is batched.  ``seg_head`` may be ``None`` (feature gap only).
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    indices = list(sample_indices)
    if len(indices) != images.shape[0]:
        raise ParameterError("sample_indices length must match the batch")

    stack = encoder.extract(images)
    grid = stack.grid
    masks = np.stack(
        [
            make_feature_mask(grid, repair.mask_ratio, np.random.default_rng(config.mask_seed + i)).values
            for i in indices
        ]
    )
    batched = FeatureMask(values=masks, ratio=repair.mask_ratio)
    with torch.no_grad():
        decoded = repair(stack, batched, mode="eval")
        grouped_e, grouped_d = group(stack), group(decoded)
        gaps = discrepancy_map(grouped_e, grouped_d).numpy()
        seg_maps = None
        if seg_head is not None:
            seg_maps = seg_head(similarity_feature(grouped_e, grouped_d)).numpy()

    size = encoder.spec.input_size
    top = config.top_count if config.top_count is not None else default_top_count(size * size)
    results = []
    for b in range(images.shape[0]):
        seg_b = seg_maps[b] if seg_maps is not None else None
        s_al = anomaly_map(gaps[b], seg_b, config.lambda1, config.lambda2, target_size=size)
        results.append(
            ScoredImage(
                score_map=s_al,
                score=image_score(s_al, top),
                gap_map=gaps[b],
                seg_map=seg_b,
            )
        )
    return results
