"""Procedural two-class texture corpus for desk-scale runs.

Writes an MVTec-style tree of small synthetic texture images: fine stripes
and checkerboards whose period divides the encoder patch size, so every
patch within an image repeats the same motif (with per-image phase,
orientation, and tint).  Held-out pseudo-anomalous test images (with
ground-truth masks) come from the same synthesis engine the trainer uses.
Everything is deterministic per seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import DatasetIndex, load_dataset, save_image, save_mask
from .synthesis import AnomalySynthesizer, SynthesisConfig

TOY_CLASSES = ("checker", "stripes")
TOY_IMAGE_SIZE = 64

# Toy anomalies blend at opacity >= 0.4 into coarse two-octave blobs: the
# corpus is meant to be deliberately easy, so faint blends and sub-patch
# mask fragments are excluded.
TOY_OPACITY_RANGE = (0.4, 1.0)
TOY_OCTAVE_SCALES = (2, 4)

_PIXEL_NOISE = 0.015


def stripes_image(rng: np.random.Generator, size: int = TOY_IMAGE_SIZE) -> np.ndarray:
    """Axis-aligned sinusoidal stripes; the period divides the 8-px patch."""
    period = int(rng.choice([4, 8]))
    phase = rng.uniform(0.0, 2.0 * np.pi)
    horizontal = rng.random() < 0.5
    wave = np.sin(2.0 * np.pi * np.arange(size) / period + phase)
    base = 0.55 + 0.3 * (wave[None, :] if horizontal else wave[:, None])
    base = np.broadcast_to(base, (size, size))
    tint = rng.uniform(0.8, 1.0, size=3)
    image = base[..., None] * tint + rng.normal(0.0, _PIXEL_NOISE, size=(size, size, 3))
    return np.clip(image, 0.0, 1.0)


def checker_image(rng: np.random.Generator, size: int = TOY_IMAGE_SIZE) -> np.ndarray:
    """Two-tone checkerboard with patch-dividing cell size and random offset."""
    cell = int(rng.choice([2, 4]))
    off_y, off_x = int(rng.integers(cell)), int(rng.integers(cell))
    ys, xs = np.mgrid[0:size, 0:size]
    board = (((ys + off_y) // cell + (xs + off_x) // cell) % 2).astype(np.float64)
    low, high = rng.uniform(0.25, 0.4), rng.uniform(0.65, 0.8)
    base = low + (high - low) * board
    tint = rng.uniform(0.8, 1.0, size=3)
    image = base[..., None] * tint + rng.normal(0.0, _PIXEL_NOISE, size=(size, size, 3))
    return np.clip(image, 0.0, 1.0)


_GENERATORS = {"stripes": stripes_image, "checker": checker_image}


TEXTURE_BANK_DIR = "_textures"
TEXTURES_PER_CLASS = 20


def toy_synthesis_config(texture_dir=None) -> SynthesisConfig:
    """Texture classes use the full-image foreground and strong blends.

    With ``texture_dir`` set (the corpus's texture bank), anomalies blend in
    patches of the *other* class's pattern about half the time -- content a
    unified multi-class model considers normal, which is exactly what makes
    plain reconstruction identity-map.
    """
    return SynthesisConfig(
        foreground_method="full",
        opacity_range=TOY_OPACITY_RANGE,
        octave_scales=TOY_OCTAVE_SCALES,
        texture_dir=None if texture_dir is None else str(texture_dir),
    )


def generate_toy_corpus(
    root,
    n_train_per_class: int = 100,
    n_test_normal_per_class: int = 20,
    n_test_anomalous_per_class: int = 20,
    size: int = TOY_IMAGE_SIZE,
    seed: int = 0,
) -> DatasetIndex:
    """Write the corpus tree under ``root`` and return its dataset index."""
    root = Path(root)
    rng = np.random.default_rng(seed)

    bank = root / TEXTURE_BANK_DIR
    bank.mkdir(parents=True, exist_ok=True)
    bank_rng = np.random.default_rng(seed + 77)
    for class_name in TOY_CLASSES:
        for i in range(TEXTURES_PER_CLASS):
            save_image(_GENERATORS[class_name](bank_rng, size), bank / f"{class_name}_{i:02d}.png")

    synthesizer = AnomalySynthesizer(toy_synthesis_config(texture_dir=bank))

    for class_name in TOY_CLASSES:
        make = _GENERATORS[class_name]
        train_dir = root / class_name / "train" / "good"
        test_good = root / class_name / "test" / "good"
        test_bad = root / class_name / "test" / "synthetic"
        gt_dir = root / class_name / "ground_truth" / "synthetic"
        for d in (train_dir, test_good, test_bad, gt_dir):
            d.mkdir(parents=True, exist_ok=True)

        for i in range(n_train_per_class):
            save_image(make(rng, size), train_dir / f"{i:03d}.png")
        for i in range(n_test_normal_per_class):
            save_image(make(rng, size), test_good / f"{i:03d}.png")
        for i in range(n_test_anomalous_per_class):
            sample = synthesizer.sample(make(rng, size), rng, class_name=class_name)
            while sample.degenerate:
                sample = synthesizer.sample(make(rng, size), rng, class_name=class_name)
            save_image(sample.anomalous, test_bad / f"{i:03d}.png")
            save_mask(sample.mask, gt_dir / f"{i:03d}_mask.png")

    return load_dataset(root)


def toy_config():
    """Full config profile for the toy corpus (iteration budgets, synthesis)."""
    from .config import default_config

    config = default_config()
    config.synthesis.foreground_method = "full"
    config.synthesis.opacity_min = TOY_OPACITY_RANGE[0]
    config.synthesis.opacity_max = TOY_OPACITY_RANGE[1]
    config.synthesis.octave_scales = list(TOY_OCTAVE_SCALES)
    return config
