"""Trainable bottleneck and decoder that reconstruct normal features.

The decoder consumes the final encoder map (token-masked, squeezed through an
MLP bottleneck) and is optimized so its outputs match the encoder's features
for normal inputs and for pseudo-anomalous inputs alike.  At test time the
per-token cosine gap between encoder and decoder features localizes defects.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np
import torch
from torch import nn

from .backbone import (
    NUM_FEATURE_MAPS,
    BackboneSpec,
    FeatureStack,
    TransformerLayer,
    init_transformer_weights,
    load_weights,
    save_weights,
)
from .errors import ParameterError

COSINE_EPS = 1e-8
DEFAULT_DROP_RATE = 0.4
DEFAULT_MASK_RATIO = 0.4

LOW_GROUP = slice(0, 4)
HIGH_GROUP = slice(4, 8)


@dataclasses.dataclass(frozen=True)
class FeatureMask:
    """Binary token mask at encoder grid resolution (0 = dropped token)."""

    values: np.ndarray
    ratio: float


@dataclasses.dataclass(frozen=True)
class GroupedFeatures:
    """Low/high semantic-level averages of a feature stack, each (B, N, C)."""

    low: torch.Tensor
    high: torch.Tensor
    grid: tuple[int, int]


def make_feature_mask(
    grid: tuple[int, int],
    ratio: float,
    rng: np.random.Generator,
    batch_size: int | None = None,
) -> FeatureMask:
    """Draw an independent keep/drop decision per token position.

    A position is dropped (mask 0) when its uniform draw falls below ``ratio``,
    so the expected dropped fraction equals ``ratio`` exactly.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError(f"mask ratio {ratio} outside [0, 1]")
    shape = grid if batch_size is None else (batch_size, *grid)
    draws = rng.random(size=shape)
    return FeatureMask(values=(draws >= ratio).astype(np.uint8), ratio=float(ratio))


class Bottleneck(nn.Module):
    """Single feed-forward block (expand x4, GELU, dropout, project back).

    Dropout draws come from an explicit generator so training runs are
    reproducible; pass ``return_hidden=True`` to observe the post-dropout
    activations.
    """

    def __init__(self, dim: int, drop_rate: float = DEFAULT_DROP_RATE) -> None:
        super().__init__()
        if not 0.0 <= drop_rate < 1.0:
            raise ParameterError(f"drop_rate {drop_rate} outside [0, 1)")
        self.drop_rate = drop_rate
        self.fc1 = nn.Linear(dim, dim * 4)
        self.fc2 = nn.Linear(dim * 4, dim)
        self.act = nn.GELU()
        self._dropout_gen = torch.Generator()

    def seed_dropout(self, seed: int) -> None:
        self._dropout_gen.manual_seed(seed)

    def forward(
        self, tokens: torch.Tensor, training: bool, return_hidden: bool = False
    ) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
        hidden = self.act(self.fc1(tokens))
        if training and self.drop_rate > 0.0:
            keep = (
                torch.rand(
                    hidden.shape, generator=self._dropout_gen, dtype=hidden.dtype
                )
                >= self.drop_rate
            ).to(hidden.dtype)
            hidden = hidden * keep / (1.0 - self.drop_rate)
        out = self.fc2(hidden)
        if return_hidden:
            return out, hidden
        return out


class RepairNet(nn.Module):
    """Bottleneck plus an 8-layer transformer decoder mirroring the encoder width."""

    def __init__(
        self,
        spec: BackboneSpec,
        drop_rate: float = DEFAULT_DROP_RATE,
        mask_ratio: float = DEFAULT_MASK_RATIO,
        init_seed: int | None = None,
    ) -> None:
        super().__init__()
        if not 0.0 <= mask_ratio <= 1.0:
            raise ParameterError(f"mask_ratio {mask_ratio} outside [0, 1]")
        self.spec = spec
        self.mask_ratio = mask_ratio
        if init_seed is not None:
            with torch.random.fork_rng():
                torch.manual_seed(init_seed)
                self._build(drop_rate)
        else:
            self._build(drop_rate)

    def _build(self, drop_rate: float) -> None:
        spec = self.spec
        self.bottleneck = Bottleneck(spec.embed_dim, drop_rate)
        # positional embedding on the decoder input: masked tokens all enter the
        # bottleneck as the same zero vector, so without it the decoder could
        # not produce position-specific reconstructions for them
        self.pos_embed = nn.Parameter(0.02 * torch.randn(1, spec.num_tokens, spec.embed_dim))
        self.decoder = nn.ModuleList(
            TransformerLayer(spec.embed_dim, spec.num_heads, spec.mlp_ratio)
            for _ in range(NUM_FEATURE_MAPS)
        )
        init_transformer_weights(self)

    @property
    def drop_rate(self) -> float:
        return self.bottleneck.drop_rate

    def seed_dropout(self, seed: int) -> None:
        self.bottleneck.seed_dropout(seed)

    def forward(
        self,
        encoder_stack: FeatureStack,
        mask: FeatureMask | None,
        mode: str = "train",
    ) -> FeatureStack:
        """Decode the (masked) final encoder map into eight decoder maps.

        Masking zeroes whole token embeddings and applies in both modes;
        dropout is active only in ``train`` mode.
        """
        if mode not in ("train", "eval"):
            raise ParameterError(f"unknown mode {mode!r}")
        tokens = encoder_stack.maps[-1]
        if mask is not None:
            tokens = tokens * _mask_tensor(mask, encoder_stack)
        x = self.bottleneck(tokens, training=mode == "train") + self.pos_embed
        outputs = []
        for layer in self.decoder:
            x = layer(x)
            outputs.append(x)
        return FeatureStack(maps=tuple(outputs), grid=encoder_stack.grid, source="decoder")


def _mask_tensor(mask: FeatureMask, stack: FeatureStack) -> torch.Tensor:
    values = np.asarray(mask.values)
    h, w = stack.grid
    if values.shape[-2:] != (h, w):
        raise ParameterError(f"mask grid {values.shape[-2:]} != token grid {(h, w)}")
    t = torch.as_tensor(values, dtype=stack.maps[0].dtype)
    if t.ndim == 2:
        t = t.reshape(1, h * w, 1)
    elif t.ndim == 3:
        if t.shape[0] not in (1, stack.batch_size):
            raise ParameterError(
                f"mask batch {t.shape[0]} incompatible with feature batch {stack.batch_size}"
            )
        t = t.reshape(t.shape[0], h * w, 1)
    else:
        raise ParameterError(f"mask must be 2-D or 3-D, got shape {tuple(values.shape)}")
    return t


def group(stack: FeatureStack) -> GroupedFeatures:
    """Average maps 0-3 into the low group and maps 4-7 into the high group."""
    low = torch.stack(stack.maps[LOW_GROUP]).mean(dim=0)
    high = torch.stack(stack.maps[HIGH_GROUP]).mean(dim=0)
    return GroupedFeatures(low=low, high=high, grid=stack.grid)


def _flat_cosine(a: torch.Tensor, b: torch.Tensor, eps: float) -> torch.Tensor:
    af = a.reshape(a.shape[0], -1)
    bf = b.reshape(b.shape[0], -1)
    num = (af * bf).sum(dim=-1)
    den = af.norm(dim=-1).clamp_min(eps) * bf.norm(dim=-1).clamp_min(eps)
    return num / den


def discrepancy(
    grouped_e: GroupedFeatures, grouped_d: GroupedFeatures, eps: float = COSINE_EPS
) -> torch.Tensor:
    """Sum over groups of one minus the flattened cosine similarity.

    Each sample's group maps are flattened to single vectors; the per-sample
    value lies in [0, 4] and the result is the batch mean.
    """
    _check_grouped(grouped_e, grouped_d)
    per_sample = (1.0 - _flat_cosine(grouped_e.low, grouped_d.low, eps)) + (
        1.0 - _flat_cosine(grouped_e.high, grouped_d.high, eps)
    )
    return per_sample.mean()


def discrepancy_map(
    grouped_e: GroupedFeatures, grouped_d: GroupedFeatures, eps: float = COSINE_EPS
) -> torch.Tensor:
    """Per-token cosine gap summed over groups, shape (B, h, w), range [0, 4]."""
    _check_grouped(grouped_e, grouped_d)
    total = None
    for fe, fd in ((grouped_e.low, grouped_d.low), (grouped_e.high, grouped_d.high)):
        num = (fe * fd).sum(dim=-1)
        den = fe.norm(dim=-1).clamp_min(eps) * fd.norm(dim=-1).clamp_min(eps)
        gap = 1.0 - num / den
        total = gap if total is None else total + gap
    h, w = grouped_e.grid
    return total.reshape(-1, h, w)


def nrar_loss(
    grouped_e_normal: GroupedFeatures,
    grouped_d_normal: GroupedFeatures,
    grouped_d_anomalous: GroupedFeatures,
) -> torch.Tensor:
    """Reconstruction-plus-repair objective: both decoder outputs are pulled
    toward the encoder's normal features.  Range [0, 8]."""
    return discrepancy(grouped_e_normal, grouped_d_normal) + discrepancy(
        grouped_e_normal, grouped_d_anomalous
    )


def _check_grouped(a: GroupedFeatures, b: GroupedFeatures) -> None:
    if a.low.shape != b.low.shape or a.high.shape != b.high.shape:
        raise ParameterError("grouped feature shapes do not match")


def repair_spec_hash(spec: BackboneSpec, drop_rate: float, mask_ratio: float) -> str:
    payload = json.dumps(
        {"spec": dataclasses.asdict(spec), "drop_rate": drop_rate, "mask_ratio": mask_ratio},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def save_repair_checkpoint(net: RepairNet, path, iteration: int) -> None:
    meta = {
        "kind": "repair_net",
        "spec": dataclasses.asdict(net.spec),
        "drop_rate": net.drop_rate,
        "mask_ratio": net.mask_ratio,
        "spec_hash": repair_spec_hash(net.spec, net.drop_rate, net.mask_ratio),
        "iteration": int(iteration),
    }
    save_weights(net, path, meta=meta)


def load_repair_checkpoint(path) -> tuple[RepairNet, int]:
    """Rebuild a RepairNet from a checkpoint written by save_repair_checkpoint."""
    with np.load(path) as data:
        if "__meta__" not in data.files:
            raise ParameterError(f"{path} is not a repair-net checkpoint (missing metadata)")
        meta = json.loads(bytes(data["__meta__"]).decode())
    if meta.get("kind") != "repair_net":
        raise ParameterError(f"{path} is not a repair-net checkpoint")
    spec_fields = dict(meta["spec"])
    for key in ("tap_layers", "normalize_mean", "normalize_std"):
        spec_fields[key] = tuple(spec_fields[key])
    spec = BackboneSpec(**spec_fields)
    net = RepairNet(spec, drop_rate=meta["drop_rate"], mask_ratio=meta["mask_ratio"])
    load_weights(net, path)
    return net, int(meta["iteration"])
