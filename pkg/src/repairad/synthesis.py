"""Pseudo-defect synthesis: Perlin-noise masks blended with texture patches.

Training never sees real defects, so anomalous samples are manufactured by
carving blob-shaped regions out of a gradient-noise field and alpha-blending
an unrelated texture into those regions, restricted to the image foreground.
The binary region mask doubles as segmentation ground truth.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ParameterError

# Gradient lattices use unit direction vectors and each octave is scaled by
# sqrt(2), so every octave (and any average of octaves) stays in [-1, 1].
PERLIN_VALUE_BOUND = 1.0

# Top quantile of the noise field kept as anomalous area.  Quantile rather
# than absolute thresholding keeps the mask area independent of the octave
# mix's amplitude.
DEFAULT_MASK_QUANTILE = 0.8

# Documented band for the per-image anomalous-pixel fraction under default
# parameters and a full foreground (see the mask-area conformance test).
MASK_AREA_BAND = (0.05, 0.35)

DEFAULT_OCTAVE_SCALES = (2, 4, 8, 16)
DEFAULT_OPACITY_RANGE = (0.15, 1.0)
DEFAULT_RESAMPLE_RETRIES = 5

_EPS = 1e-12


@dataclasses.dataclass(frozen=True)
class NoiseField:
    """Real-valued gradient-noise grid plus the octave scales that built it."""

    values: np.ndarray
    octave_scales: tuple[int, ...]

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("noise field contains non-finite values")


@dataclasses.dataclass(frozen=True)
class SyntheticSample:
    """A (normal, anomalous, mask) training triple.

    ``anomalous`` equals ``normal`` exactly wherever ``mask`` is 0.  When the
    noise mask never intersected the foreground (even after resampling) the
    sample is flagged ``degenerate`` and carries an empty mask.
    """

    normal: np.ndarray
    anomalous: np.ndarray
    mask: np.ndarray
    opacity: float
    degenerate: bool = False


def perlin_noise(
    height: int,
    width: int,
    octave_scales: tuple[int, ...] | list[int],
    rng: np.random.Generator,
) -> NoiseField:
    """Generate zero-mean gradient noise averaged over the given lattice scales.

    Each scale ``s`` lays an (s+1)x(s+1) lattice of unit gradient vectors over
    the image, interpolated with the quintic fade.  Values are bounded by
    ``PERLIN_VALUE_BOUND`` and deterministic for a given rng state.

    Args:
        height: Output rows, >= 2.
        width: Output columns, >= 2.
        octave_scales: Lattice resolutions, each in [1, min(height, width)].
        rng: Random source; only ``rng.uniform`` is consumed.

    Returns:
        NoiseField of shape (height, width).
    """
    if height < 2 or width < 2:
        raise ParameterError(f"field dimensions must be >= 2, got {height}x{width}")
    scales = tuple(int(s) for s in octave_scales)
    if not scales:
        raise ParameterError("octave_scales must be non-empty")
    for s in scales:
        if s < 1 or s > min(height, width):
            raise ParameterError(
                f"octave scale {s} outside [1, {min(height, width)}]"
            )

    total = np.zeros((height, width), dtype=np.float64)
    for s in scales:
        total += _single_octave(height, width, s, rng)
    return NoiseField(values=total / len(scales), octave_scales=scales)


def _single_octave(height: int, width: int, scale: int, rng) -> np.ndarray:
    raw = np.asarray(rng.uniform(-1.0, 1.0, size=(scale + 1, scale + 1, 2)))
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    grads = np.where(norms > _EPS, raw / np.maximum(norms, _EPS), 0.0)

    ys = np.arange(height, dtype=np.float64) * (scale / height)
    xs = np.arange(width, dtype=np.float64) * (scale / width)
    y0 = np.minimum(ys.astype(np.int64), scale - 1)
    x0 = np.minimum(xs.astype(np.int64), scale - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    gy0, gx0 = y0[:, None], x0[None, :]

    def corner(dy: int, dx: int) -> np.ndarray:
        g = grads[gy0 + dy, gx0 + dx]
        return g[..., 0] * (fy - dy) + g[..., 1] * (fx - dx)

    u = _fade(fy)
    v = _fade(fx)
    top = _lerp(corner(0, 0), corner(0, 1), v)
    bottom = _lerp(corner(1, 0), corner(1, 1), v)
    return np.sqrt(2.0) * _lerp(top, bottom, u)


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _lerp(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> np.ndarray:
    return a + w * (b - a)


def binarize(noise: NoiseField, threshold: float) -> np.ndarray:
    """Threshold a noise field into a {0,1} mask (strictly above)."""
    if not np.isfinite(threshold):
        raise ParameterError("threshold must be finite")
    return (noise.values > threshold).astype(np.uint8)


def foreground_mask(image: np.ndarray, method: str = "threshold") -> np.ndarray:
    """Estimate the object foreground of an image.

    ``full`` marks everything (texture categories).  ``threshold`` binarizes
    the gray intensity at the variance-maximizing split, picks the side that
    occupies less of the image border (objects rarely touch it), and keeps the
    largest 8-connected component.  Degenerate inputs (no contrast, empty
    estimate) fall back to the full mask.
    """
    gray = image.mean(axis=-1) if image.ndim == 3 else np.asarray(image, dtype=np.float64)
    full = np.ones(gray.shape, dtype=np.uint8)
    if method == "full":
        return full
    if method != "threshold":
        raise ParameterError(f"unknown foreground method {method!r}")

    if float(gray.max() - gray.min()) < 1e-6:
        return full
    fg = gray > _otsu_threshold(gray)
    border = np.zeros(gray.shape, dtype=bool)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    if fg[border].mean() > 0.5:
        fg = ~fg
    fg = _largest_component(fg)
    if not fg.any():
        return full
    return fg.astype(np.uint8)


def _otsu_threshold(gray: np.ndarray) -> float:
    """Between-class-variance-maximizing intensity split over a 256-bin histogram."""
    lo, hi = float(gray.min()), float(gray.max())
    hist, edges = np.histogram(gray, bins=256, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2.0
    weight = hist.astype(np.float64)
    w0 = np.cumsum(weight)
    w1 = w0[-1] - w0
    m0 = np.cumsum(weight * centers)
    mean0 = m0 / np.maximum(w0, _EPS)
    mean1 = (m0[-1] - m0) / np.maximum(w1, _EPS)
    variance = w0 * w1 * (mean0 - mean1) ** 2
    return float(centers[int(np.argmax(variance))])


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, count + 1))
    return labels == (1 + int(np.argmax(sizes)))


def compose_anomaly(
    normal: np.ndarray,
    texture: np.ndarray,
    foreground: np.ndarray,
    noise_mask: np.ndarray,
    opacity: float,
    rng: np.random.Generator,
    octave_scales: tuple[int, ...] = DEFAULT_OCTAVE_SCALES,
    mask_quantile: float = DEFAULT_MASK_QUANTILE,
    retries: int = DEFAULT_RESAMPLE_RETRIES,
) -> SyntheticSample:
    """Blend a texture into the masked foreground of a normal image.

    The anomaly region is ``noise_mask AND foreground``.  Inside it the pixel
    becomes ``opacity * texture + (1 - opacity) * normal``; outside it the
    normal image is passed through untouched.  An empty region triggers up to
    ``retries`` fresh noise draws before the sample is returned degenerate.
    """
    shape = normal.shape[:2]
    for name, grid in (("texture", texture), ("foreground", foreground), ("noise_mask", noise_mask)):
        if grid.shape[:2] != shape:
            raise ParameterError(f"{name} shape {grid.shape[:2]} != image shape {shape}")
    lo, hi = DEFAULT_OPACITY_RANGE
    if not (lo <= opacity <= 1.0):
        raise ParameterError(f"opacity {opacity} outside [{lo}, 1]")

    fg = foreground.astype(bool)
    region = noise_mask.astype(bool) & fg
    attempts = 0
    while not region.any() and attempts < retries:
        field = perlin_noise(shape[0], shape[1], octave_scales, rng)
        threshold = float(np.quantile(field.values, mask_quantile))
        region = (field.values > threshold) & fg
        attempts += 1

    if not region.any():
        return SyntheticSample(
            normal=normal,
            anomalous=normal.copy(),
            mask=np.zeros(shape, dtype=np.uint8),
            opacity=float(opacity),
            degenerate=True,
        )

    region3 = region[..., None] if normal.ndim == 3 else region
    blended = opacity * texture + (1.0 - opacity) * normal
    anomalous = np.where(region3, blended, normal)
    return SyntheticSample(
        normal=normal,
        anomalous=anomalous,
        mask=region.astype(np.uint8),
        opacity=float(opacity),
    )


@dataclasses.dataclass
class SynthesisConfig:
    """Knobs of the pseudo-defect generator; all values are config-overridable."""

    octave_scales: tuple[int, ...] = DEFAULT_OCTAVE_SCALES
    mask_quantile: float = DEFAULT_MASK_QUANTILE
    opacity_range: tuple[float, float] = DEFAULT_OPACITY_RANGE
    resample_retries: int = DEFAULT_RESAMPLE_RETRIES
    foreground_method: str = "threshold"
    per_class_foreground: dict[str, str] = dataclasses.field(default_factory=dict)
    texture_dir: str | None = None
    mask_area_band: tuple[float, float] = MASK_AREA_BAND

    def foreground_for(self, class_name: str | None) -> str:
        if class_name is not None and class_name in self.per_class_foreground:
            return self.per_class_foreground[class_name]
        return self.foreground_method


class TextureSource:
    """Supplies blend textures: auxiliary images if a directory is given,
    otherwise randomly transformed copies of the input itself."""

    SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

    def __init__(self, texture_dir: str | Path | None = None) -> None:
        self.paths: list[Path] = []
        if texture_dir is not None:
            root = Path(texture_dir)
            self.paths = sorted(
                p for p in root.rglob("*") if p.suffix.lower() in self.SUFFIXES
            )

    def sample(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        h, w = image.shape[:2]
        if self.paths:
            path = self.paths[int(rng.integers(len(self.paths)))]
            with Image.open(path) as img:
                tex = np.asarray(
                    img.convert("RGB").resize((w, h), Image.BILINEAR),
                    dtype=np.float64,
                ) / 255.0
            if image.ndim == 2:
                tex = tex.mean(axis=-1)
            return tex
        return self._self_augment(image, rng)

    @staticmethod
    def _self_augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        h, w = image.shape[:2]
        tex = np.roll(image, shift=(int(rng.integers(h // 4, 3 * h // 4)),
                                    int(rng.integers(w // 4, 3 * w // 4))), axis=(0, 1))
        if rng.random() < 0.5:
            tex = tex[::-1]
        if rng.random() < 0.5:
            tex = tex[:, ::-1]
        if tex.ndim == 3 and rng.random() < 0.5:
            tex = tex[..., rng.permutation(tex.shape[-1])]
        # invert-or-jitter keeps the patch visibly unlike the source region
        if rng.random() < 0.5:
            tex = 1.0 - tex
        else:
            gain = rng.uniform(0.5, 1.5)
            bias = rng.uniform(-0.2, 0.2)
            tex = np.clip(gain * tex + bias, 0.0, 1.0)
        return np.ascontiguousarray(tex)


class AnomalySynthesizer:
    """End-to-end generator producing SyntheticSamples from normal images."""

    def __init__(self, config: SynthesisConfig | None = None) -> None:
        self.config = config or SynthesisConfig()
        self.textures = TextureSource(self.config.texture_dir)

    def sample(
        self,
        image: np.ndarray,
        rng: np.random.Generator,
        class_name: str | None = None,
        foreground: np.ndarray | None = None,
    ) -> SyntheticSample:
        cfg = self.config
        if foreground is None:
            foreground = foreground_mask(image, cfg.foreground_for(class_name))
        field = perlin_noise(image.shape[0], image.shape[1], cfg.octave_scales, rng)
        threshold = float(np.quantile(field.values, cfg.mask_quantile))
        noise_mask = binarize(field, threshold)
        texture = self.textures.sample(image, rng)
        opacity = float(rng.uniform(*cfg.opacity_range))
        return compose_anomaly(
            image,
            texture,
            foreground,
            noise_mask,
            opacity,
            rng,
            octave_scales=cfg.octave_scales,
            mask_quantile=cfg.mask_quantile,
            retries=cfg.resample_retries,
        )
