"""Frozen feature encoder: a plain patch-token vision transformer.

The encoder exports eight intermediate token maps per image.  A desk-scale
toy instance (randomly initialized from a fixed seed) ships for tests and
demos; the same module loads real pretrained weights from an ``.npz``
container whose keys mirror the module's state dict.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np
import torch
from PIL import Image
from torch import nn

from .errors import ParameterError, StateError

NUM_FEATURE_MAPS = 8

# Standard large-corpus channel statistics; override per config.
DEFAULT_NORMALIZE_MEAN = (0.485, 0.456, 0.406)
DEFAULT_NORMALIZE_STD = (0.229, 0.224, 0.225)


@dataclasses.dataclass(frozen=True)
class BackboneSpec:
    """Geometry and preprocessing contract of an encoder."""

    patch_size: int
    embed_dim: int
    depth: int
    num_heads: int
    tap_layers: tuple[int, ...]
    input_size: int
    resize_size: int
    mlp_ratio: float = 4.0
    normalize_mean: tuple[float, float, float] = DEFAULT_NORMALIZE_MEAN
    normalize_std: tuple[float, float, float] = DEFAULT_NORMALIZE_STD

    def __post_init__(self) -> None:
        if len(self.tap_layers) != NUM_FEATURE_MAPS:
            raise ParameterError(f"expected {NUM_FEATURE_MAPS} tap layers, got {len(self.tap_layers)}")
        if list(self.tap_layers) != sorted(set(self.tap_layers)):
            raise ParameterError("tap_layers must be strictly increasing")
        if self.tap_layers[-1] >= self.depth:
            raise ParameterError("tap_layers must all be < depth")
        if self.input_size % self.patch_size != 0:
            raise ParameterError(
                f"input_size {self.input_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ParameterError("embed_dim must be divisible by num_heads")

    @property
    def grid_size(self) -> int:
        return self.input_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size**2


def toy_spec() -> BackboneSpec:
    """Desk-scale encoder: 64x64 inputs, patch 8, width 64, all 8 layers tapped."""
    return BackboneSpec(
        patch_size=8,
        embed_dim=64,
        depth=8,
        num_heads=4,
        tap_layers=(0, 1, 2, 3, 4, 5, 6, 7),
        input_size=64,
        resize_size=64,
    )


def vit_base_14_spec() -> BackboneSpec:
    """Reference encoder geometry: ViT-Base/14 at 392x392 with the 8 middle layers tapped."""
    return BackboneSpec(
        patch_size=14,
        embed_dim=768,
        depth=12,
        num_heads=12,
        tap_layers=(2, 3, 4, 5, 6, 7, 8, 9),
        input_size=392,
        resize_size=448,
    )


@dataclasses.dataclass
class FeatureStack:
    """Eight same-shape token maps, each of shape (batch, tokens, channels)."""

    maps: tuple[torch.Tensor, ...]
    grid: tuple[int, int]
    source: str

    def __post_init__(self) -> None:
        if len(self.maps) != NUM_FEATURE_MAPS:
            raise ParameterError(f"expected {NUM_FEATURE_MAPS} maps, got {len(self.maps)}")
        shape = self.maps[0].shape
        for m in self.maps:
            if m.shape != shape:
                raise ParameterError("all feature maps must share one shape")
            if not torch.isfinite(m).all():
                raise ParameterError("feature maps must be finite")
        if shape[-2] != self.grid[0] * self.grid[1]:
            raise ParameterError(f"token count {shape[-2]} != grid {self.grid}")

    @property
    def batch_size(self) -> int:
        return self.maps[0].shape[0]

    @property
    def channels(self) -> int:
        return self.maps[0].shape[-1]


def init_transformer_weights(module: nn.Module) -> None:
    """Standard ViT initialization: truncated normal weights, zero biases."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class TransformerLayer(nn.Module):
    """Pre-norm multi-head self-attention plus an expand-project MLP."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.act = nn.GELU()

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        head_dim = c // self.num_heads
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * head_dim**-0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.norm1(x))
        x = x + self.fc2(self.act(self.fc1(self.norm2(x))))
        return x


class Backbone(nn.Module):
    """Patch-token transformer encoder exporting the tapped layer outputs.

    Built either with random weights (``seed`` given) or empty, in which case
    ``load_weights`` must run before ``extract``.
    """

    def __init__(self, spec: BackboneSpec, seed: int | None = None) -> None:
        super().__init__()
        self.spec = spec
        in_dim = spec.patch_size * spec.patch_size * 3
        if seed is not None:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                self._build(in_dim)
            self._loaded = True
        else:
            self._build(in_dim)
            self._loaded = False
        self.freeze()

    def _build(self, in_dim: int) -> None:
        spec = self.spec
        self.patch_embed = nn.Linear(in_dim, spec.embed_dim)
        self.pos_embed = nn.Parameter(0.02 * torch.randn(1, spec.num_tokens, spec.embed_dim))
        self.layers = nn.ModuleList(
            TransformerLayer(spec.embed_dim, spec.num_heads, spec.mlp_ratio)
            for _ in range(spec.depth)
        )
        init_transformer_weights(self)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        b = images.shape[0]
        g, p = self.spec.grid_size, self.spec.patch_size
        x = images.reshape(b, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, p * p * 3)

    @torch.no_grad()
    def extract(self, images: np.ndarray | torch.Tensor) -> FeatureStack:
        """Encode preprocessed images into the eight tapped token maps.

        Accepts a single (S, S, 3) image or a batch (B, S, S, 3).
        """
        if not self._loaded:
            raise StateError("backbone weights not loaded; call load_weights first")
        x = torch.as_tensor(np.asarray(images)) if not torch.is_tensor(images) else images
        if x.ndim == 3:
            x = x.unsqueeze(0)
        s = self.spec.input_size
        if x.shape[1:] != (s, s, 3):
            raise ParameterError(f"expected input of shape (B, {s}, {s}, 3), got {tuple(x.shape)}")
        x = x.to(self.pos_embed.dtype)
        tokens = self.patch_embed(self.patchify(x)) + self.pos_embed
        taps = []
        want = set(self.spec.tap_layers)
        for i, layer in enumerate(self.layers):
            tokens = layer(tokens)
            if i in want:
                taps.append(tokens.clone())
        g = self.spec.grid_size
        return FeatureStack(maps=tuple(taps), grid=(g, g), source="encoder")

    def load_weights(self, path) -> None:
        load_weights(self, path)
        self._loaded = True


def toy_backbone(seed: int = 0) -> Backbone:
    return Backbone(toy_spec(), seed=seed)


def preprocess(
    raw_image: np.ndarray,
    spec: BackboneSpec,
    mask: np.ndarray | None = None,
    normalize: bool = True,
) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Resize (shorter side), center-crop, scale to [0,1], and normalize.

    ``normalize=False`` stops after the [0,1] scaling (synthesis blends in
    image space).  A paired ground-truth mask, if given, follows the identical
    geometry with nearest-neighbor interpolation and is returned alongside.
    """
    if raw_image.size == 0:
        raise ParameterError("raw image is empty")
    img = np.asarray(raw_image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    else:
        img = img.astype(np.float64)

    h, w = img.shape[:2]
    scale = spec.resize_size / min(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    resized = _resize(img, nh, nw, Image.BILINEAR)
    cropped = _center_crop(resized, spec.input_size)
    out = normalize_images(cropped, spec) if normalize else cropped.astype(np.float32)

    if mask is None:
        return out
    m = (np.asarray(mask) > 0).astype(np.uint8)
    m = _resize(m.astype(np.float64), nh, nw, Image.NEAREST)
    m = _center_crop(m, spec.input_size)
    return out, (m > 0).astype(np.uint8)


def normalize_images(images: np.ndarray, spec: BackboneSpec) -> np.ndarray:
    """Apply the per-channel normalization constants to [0,1] images."""
    mean = np.asarray(spec.normalize_mean)
    std = np.asarray(spec.normalize_std)
    return ((np.asarray(images) - mean) / std).astype(np.float32)


def _resize(arr: np.ndarray, nh: int, nw: int, resample) -> np.ndarray:
    if arr.shape[:2] == (nh, nw):
        return arr
    if arr.ndim == 2:
        return np.asarray(Image.fromarray(arr.astype(np.float32), mode="F").resize((nw, nh), resample), dtype=np.float64)
    channels = [
        np.asarray(Image.fromarray(arr[..., c].astype(np.float32), mode="F").resize((nw, nh), resample), dtype=np.float64)
        for c in range(arr.shape[-1])
    ]
    return np.stack(channels, axis=-1)


def _center_crop(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[:2]
    if h < size or w < size:
        raise ParameterError(f"image {h}x{w} smaller than crop size {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return arr[top : top + size, left : left + size]


def param_checksum(module: nn.Module) -> str:
    """SHA-256 over the module's state dict (names and raw float bytes)."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_weights(module: nn.Module, path, meta: dict | None = None) -> None:
    """Write a module's parameters as an ``.npz`` of named arrays.

    Keys equal state-dict names; an optional ``__meta__`` entry carries a
    JSON string (spec hash, iteration counters, ...).
    """
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    if meta is not None:
        arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:  # keep the exact filename (np.savez appends .npz to str paths)
        np.savez(fh, **arrays)


def load_weights(module: nn.Module, path) -> dict:
    """Load an ``.npz`` weight container saved by :func:`save_weights`.

    Returns the metadata dict (empty if the file carries none).
    """
    with np.load(path) as data:
        meta = {}
        if "__meta__" in data.files:
            meta = json.loads(bytes(data["__meta__"]).decode())
        state = {k: torch.as_tensor(data[k]) for k in data.files if k != "__meta__"}
    current = module.state_dict()
    if set(state.keys()) != set(current.keys()):
        missing = set(current.keys()) - set(state.keys())
        extra = set(state.keys()) - set(current.keys())
        raise ParameterError(f"weight file mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for key, tensor in state.items():
        if tensor.shape != current[key].shape:
            raise ParameterError(
                f"weight {key!r} has shape {tuple(tensor.shape)}, expected {tuple(current[key].shape)}"
            )
    module.load_state_dict(state)
    return meta
