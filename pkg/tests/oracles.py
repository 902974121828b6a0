"""Independent brute-force oracles used to check the library implementations.

Everything here is written as plain scalar loops over explicit definitions,
deliberately avoiding the vectorized code paths under test.
"""

from __future__ import annotations

import math

import numpy as np


def auroc_pairwise(scores, labels) -> float:
    """P(positive outranks negative) with half credit for ties, by full enumeration."""
    scores = list(map(float, scores))
    labels = list(map(int, labels))
    wins = ties = total = 0
    for sp, lp in zip(scores, labels):
        if lp != 1:
            continue
        for sn, ln in zip(scores, labels):
            if ln != 0:
                continue
            total += 1
            if sp > sn:
                wins += 1
            elif sp == sn:
                ties += 1
    return (wins + 0.5 * ties) / total


def average_precision_enum(scores, labels) -> float:
    """Precision at each recall increment, thresholds enumerated one by one."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    prev_recall = 0.0
    area = 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = int((pred & (labels == 1)).sum())
        fp = int((pred & (labels == 0)).sum())
        precision = tp / (tp + fp)
        recall = tp / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def f1_max_enum(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    best = 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = int((pred & (labels == 1)).sum())
        fp = int((pred & (labels == 0)).sum())
        precision = tp / (tp + fp)
        recall = tp / n_pos
        if precision + recall > 0:
            best = max(best, 2.0 * precision * recall / (precision + recall))
    return best


def _flood_fill_regions(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    """8-connected components by breadth-first search."""
    mask = np.asarray(mask) > 0
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    regions = []
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            queue = [(sy, sx)]
            seen[sy, sx] = True
            coords = []
            while queue:
                y, x = queue.pop()
                coords.append((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
            regions.append(coords)
    return regions


def aupro_enum(maps, gts, fpr_limit: float = 0.3) -> float:
    """Exhaustive threshold sweep of the per-region-overlap curve.

    Same convention as the implementation (strictly-above binarization at
    each distinct score value, flat tail, trapezoidal integration over
    [0, fpr_limit]) but computed with plain loops and BFS components.
    """
    regions = []
    for gi, gt in enumerate(gts):
        for coords in _flood_fill_regions(gt):
            regions.append((gi, coords))
    all_values = sorted({float(v) for m in maps for v in np.asarray(m).ravel()}, reverse=True)
    n_neg = sum(int((np.asarray(g) == 0).sum()) for g in gts)

    points = []
    for t in all_values:
        preds = [np.asarray(m, dtype=np.float64) > t for m in maps]
        overlaps = []
        for gi, coords in regions:
            hit = sum(1 for (y, x) in coords if preds[gi][y, x])
            overlaps.append(hit / len(coords))
        fp = sum(
            int((pred & (np.asarray(g) == 0)).sum()) for pred, g in zip(preds, gts)
        )
        points.append((fp / n_neg, sum(overlaps) / len(overlaps)))

    # strictly-above binarization already yields the empty prediction at the
    # largest value and never the all-ones prediction
    curve = points
    deduped = {}
    for fpr, pro in curve:
        deduped[fpr] = pro  # later (more permissive) wins
    xs = sorted(deduped)
    ys = [deduped[x] for x in xs]
    if xs[-1] < fpr_limit:
        xs.append(fpr_limit)
        ys.append(ys[-1])
    else:
        cut_x, cut_y = [], []
        for x, y in zip(xs, ys):
            if x <= fpr_limit:
                cut_x.append(x)
                cut_y.append(y)
        boundary = float(np.interp(fpr_limit, xs, ys))
        xs = cut_x + [fpr_limit]
        ys = cut_y + [boundary]
    area = 0.0
    for i in range(1, len(xs)):
        area += 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1])
    return area / fpr_limit


def random_metric_instance(rng: np.random.Generator, max_elems: int = 64):
    """Scores/labels with both classes present and occasional ties."""
    n = int(rng.integers(4, max_elems + 1))
    scores = rng.random(n)
    if rng.random() < 0.5:  # inject ties
        scores = np.round(scores, 1)
    labels = (rng.random(n) < rng.uniform(0.2, 0.8)).astype(int)
    if labels.sum() == 0:
        labels[int(rng.integers(n))] = 1
    if labels.sum() == n:
        labels[int(rng.integers(n))] = 0
    return scores, labels


def bilinear_upsample_scalar(values: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-aligned bilinear resize, one output pixel at a time."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    out = np.zeros((size, size))
    for oy in range(size):
        for ox in range(size):
            sy = (oy + 0.5) * h / size - 0.5
            sx = (ox + 0.5) * w / size - 0.5
            y0 = math.floor(sy)
            x0 = math.floor(sx)
            fy = sy - y0
            fx = sx - x0
            y0c = min(max(y0, 0), h - 1)
            y1c = min(max(y0 + 1, 0), h - 1)
            x0c = min(max(x0, 0), w - 1)
            x1c = min(max(x0 + 1, 0), w - 1)
            top = values[y0c, x0c] * (1 - fx) + values[y0c, x1c] * fx
            bottom = values[y1c, x0c] * (1 - fx) + values[y1c, x1c] * fx
            out[oy, ox] = top * (1 - fy) + bottom * fy
    return out


def cosine_scalar(a, b, eps: float = 1e-8) -> float:
    num = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return num / (max(na, eps) * max(nb, eps))


def adamw_single_step(theta, grad, lr, beta1, beta2, eps, weight_decay):
    """Closed-form first AdamW step on one scalar parameter."""
    theta = theta * (1.0 - lr * weight_decay)
    m = (1.0 - beta1) * grad
    v = (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1)
    v_hat = v / (1.0 - beta2)
    return theta - lr * m_hat / (math.sqrt(v_hat) + eps)


def central_difference_gradients(loss_fn, params, coords, step: float = 1e-5):
    """Central differences of ``loss_fn()`` w.r.t. selected parameter coordinates.

    ``coords`` is a list of (tensor, flat_index) pairs; tensors are modified in
    place and restored.
    """
    grads = []
    for tensor, idx in coords:
        flat = tensor.detach().reshape(-1)
        original = float(flat[idx])
        flat[idx] = original + step
        hi = float(loss_fn())
        flat[idx] = original - step
        lo = float(loss_fn())
        flat[idx] = original
        grads.append((hi - lo) / (2.0 * step))
    return grads
