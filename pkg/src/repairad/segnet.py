"""Supervised segmentation refiner over encoder/decoder feature similarities.

The per-token element-wise product of L2-normalized encoder and decoder
group features (both groups, concatenated channel-wise) feeds a small
conv/upsample head trained with focal loss against synthetic defect masks.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .backbone import BackboneSpec, load_weights, save_weights
from .errors import ParameterError
from .repair_net import GroupedFeatures

NORMALIZE_EPS = 1e-8
DEFAULT_FOCAL_ALPHA = 0.25
DEFAULT_FOCAL_GAMMA = 2.0
UPSAMPLE_STAGES = 4

# Keep predicted probabilities strictly inside (0, 1) even when logits saturate.
_PROB_CLAMP = 1e-7

SEG_VARIANTS = ("conv-upsample", "resnet-head")


@dataclasses.dataclass(frozen=True)
class SimilarityFeature:
    """Concatenated per-group similarity maps, shape (B, 2C, h, w)."""

    values: torch.Tensor
    grid: tuple[int, int]


def similarity_feature(
    grouped_e: GroupedFeatures, grouped_d: GroupedFeatures, eps: float = NORMALIZE_EPS
) -> SimilarityFeature:
    """Element-wise product of unit-normalized group features, both groups stacked.

    Each token's channel vector is L2-normalized per group member, multiplied
    element-wise between encoder and decoder, and the two group results are
    concatenated along channels.  A token's channel sum therefore equals the
    cosine of that token's encoder/decoder features.
    """
    if grouped_e.low.shape != grouped_d.low.shape:
        raise ParameterError("grouped feature shapes do not match")
    h, w = grouped_e.grid
    parts = []
    for fe, fd in ((grouped_e.low, grouped_d.low), (grouped_e.high, grouped_d.high)):
        ue = fe / fe.norm(dim=-1, keepdim=True).clamp_min(eps)
        ud = fd / fd.norm(dim=-1, keepdim=True).clamp_min(eps)
        parts.append(ue * ud)
    x = torch.cat(parts, dim=-1)  # (B, N, 2C)
    b, _, c2 = x.shape
    x = x.transpose(1, 2).reshape(b, c2, h, w)
    return SimilarityFeature(values=x, grid=(h, w))


def _norm_groups(channels: int) -> int:
    return math.gcd(8, channels)


class SegmentationHead(nn.Module):
    """Four conv blocks paired with four x2 upsamplings, then resize + sigmoid.

    Channel schedule 2C -> C -> C/2 -> C/4 -> 1; the final block is a plain
    logit conv.  The x16 upsampled logits are bilinearly resized to the input
    resolution so the prediction matches the ground-truth mask shape.
    """

    def __init__(self, spec: BackboneSpec, init_seed: int | None = None) -> None:
        super().__init__()
        self.spec = spec
        if init_seed is not None:
            with torch.random.fork_rng():
                torch.manual_seed(init_seed)
                self._build()
        else:
            self._build()

    def _build(self) -> None:
        c = self.spec.embed_dim
        widths = [2 * c, c, max(c // 2, 1), max(c // 4, 1)]
        blocks = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(cin, cout, 3, padding=1),
                    nn.GroupNorm(_norm_groups(cout), cout),
                    nn.GELU(),
                    nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                )
            )
        blocks.append(
            nn.Sequential(
                nn.Conv2d(widths[-1], 1, 3, padding=1),
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            )
        )
        self.blocks = nn.ModuleList(blocks)

    def forward(self, feature: SimilarityFeature) -> torch.Tensor:
        x = feature.values
        for block in self.blocks:
            x = block(x)
        size = self.spec.input_size
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        return torch.sigmoid(x.squeeze(1)).clamp(_PROB_CLAMP, 1.0 - _PROB_CLAMP)


class _ResidualBlock(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(_norm_groups(channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(_norm_groups(channels), channels)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm1(self.conv1(x))
        y = self.act(y)
        y = self.norm2(self.conv2(y))
        return self.act(x + y)


class ResNetStyleHead(nn.Module):
    """Ablation-only variant: residual conv stack plus a single resize to input size."""

    def __init__(self, spec: BackboneSpec, init_seed: int | None = None) -> None:
        super().__init__()
        self.spec = spec
        if init_seed is not None:
            with torch.random.fork_rng():
                torch.manual_seed(init_seed)
                self._build()
        else:
            self._build()

    def _build(self) -> None:
        c = self.spec.embed_dim
        self.stem = nn.Conv2d(2 * c, c, 3, padding=1)
        self.body = nn.Sequential(_ResidualBlock(c), _ResidualBlock(c))
        self.head = nn.Conv2d(c, 1, 1)

    def forward(self, feature: SimilarityFeature) -> torch.Tensor:
        x = self.head(self.body(self.stem(feature.values)))
        size = self.spec.input_size
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        return torch.sigmoid(x.squeeze(1)).clamp(_PROB_CLAMP, 1.0 - _PROB_CLAMP)


def build_seg_head(
    spec: BackboneSpec, variant: str = "conv-upsample", init_seed: int | None = None
) -> nn.Module:
    if variant == "conv-upsample":
        return SegmentationHead(spec, init_seed=init_seed)
    if variant == "resnet-head":
        return ResNetStyleHead(spec, init_seed=init_seed)
    raise ParameterError(f"unknown segmentation head variant {variant!r}")


def focal_loss(
    pred: torch.Tensor,
    target: torch.Tensor | np.ndarray,
    alpha_t: float = DEFAULT_FOCAL_ALPHA,
    gamma: float = DEFAULT_FOCAL_GAMMA,
) -> torch.Tensor:
    """Mean over pixels of ``-alpha_t * (1 - p_t)^gamma * log(p_t)``.

    ``p_t`` is the predicted probability of the true class: the prediction
    where the mask is 1 and its complement where the mask is 0.  ``alpha_t``
    is a uniform weight, so gamma=0, alpha_t=1 reduces exactly to binary
    cross-entropy.
    """
    if gamma < 0:
        raise ParameterError(f"gamma must be >= 0, got {gamma}")
    if not 0.0 < alpha_t <= 1.0:
        raise ParameterError(f"alpha_t must be in (0, 1], got {alpha_t}")
    t = torch.as_tensor(np.asarray(target)) if not torch.is_tensor(target) else target
    if t.shape != pred.shape:
        raise ParameterError(f"prediction shape {tuple(pred.shape)} != mask shape {tuple(t.shape)}")
    t = t.to(pred.dtype)
    p_t = torch.where(t > 0.5, pred, 1.0 - pred)
    p_t = p_t.clamp_min(1e-12)
    return (-alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def seg_spec_hash(spec: BackboneSpec, variant: str) -> str:
    payload = json.dumps({"spec": dataclasses.asdict(spec), "variant": variant}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def save_seg_checkpoint(head: nn.Module, variant: str, path, iteration: int) -> None:
    meta = {
        "kind": "seg_head",
        "variant": variant,
        "spec": dataclasses.asdict(head.spec),
        "spec_hash": seg_spec_hash(head.spec, variant),
        "iteration": int(iteration),
    }
    save_weights(head, path, meta=meta)


def load_seg_checkpoint(path) -> tuple[nn.Module, str, int]:
    with np.load(path) as data:
        if "__meta__" not in data.files:
            raise ParameterError(f"{path} is not a segmentation checkpoint (missing metadata)")
        meta = json.loads(bytes(data["__meta__"]).decode())
    if meta.get("kind") != "seg_head":
        raise ParameterError(f"{path} is not a segmentation checkpoint")
    spec_fields = dict(meta["spec"])
    for key in ("tap_layers", "normalize_mean", "normalize_std"):
        spec_fields[key] = tuple(spec_fields[key])
    spec = BackboneSpec(**spec_fields)
    head = build_seg_head(spec, variant=meta["variant"])
    load_weights(head, path)
    return head, meta["variant"], int(meta["iteration"])
