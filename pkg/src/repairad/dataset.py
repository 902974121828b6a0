"""Dataset ingestion for MVTec-style directory trees.

Layout per class::

    <root>/<class>/train/good/*.png
    <root>/<class>/test/<defect>/*.png        ("good" = normal)
    <root>/<class>/ground_truth/<defect>/<stem>_mask.png

Anomalous test images must have a pixel-aligned ground-truth mask; normal
test images carry an implicit all-zero mask.  Ordering is lexicographic
everywhere so the index is reproducible.
"""

from __future__ import annotations

import dataclasses
import hashlib
from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import BackboneSpec, preprocess
from .errors import IngestionError
from .synthesis import SynthesisConfig, foreground_mask

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclasses.dataclass(frozen=True)
class TestItem:
    image: Path
    mask: Path | None
    defect: str

    @property
    def is_anomalous(self) -> bool:
        return self.defect != "good"


@dataclasses.dataclass
class ClassIndex:
    name: str
    train: list[Path]
    test: list[TestItem]


@dataclasses.dataclass
class DatasetIndex:
    root: Path
    classes: dict[str, ClassIndex]

    @property
    def class_names(self) -> list[str]:
        return list(self.classes.keys())

    def train_items(self) -> list[tuple[str, Path]]:
        return [(name, p) for name, cls in self.classes.items() for p in cls.train]


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as img:
        return img.size


def load_dataset(root, layout: str = "mvtec-style") -> DatasetIndex:
    """Index a dataset tree, validating image/mask pairing as it walks."""
    if layout != "mvtec-style":
        raise IngestionError(f"unknown dataset layout {layout!r}")
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")

    classes: dict[str, ClassIndex] = {}
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        train_dir = class_dir / "train" / "good"
        if not train_dir.is_dir():
            continue
        train = _list_images(train_dir)
        if not train:
            raise IngestionError(f"empty train split: {train_dir}")

        test_items: list[TestItem] = []
        test_dir = class_dir / "test"
        if test_dir.is_dir():
            for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
                defect = defect_dir.name
                for image_path in _list_images(defect_dir):
                    if defect == "good":
                        test_items.append(TestItem(image=image_path, mask=None, defect=defect))
                        continue
                    mask_path = _find_mask(class_dir, defect, image_path)
                    if _image_size(mask_path) != _image_size(image_path):
                        raise IngestionError(
                            f"mask {mask_path} dimensions differ from image {image_path}"
                        )
                    test_items.append(TestItem(image=image_path, mask=mask_path, defect=defect))
        classes[class_dir.name] = ClassIndex(name=class_dir.name, train=train, test=test_items)

    if not classes:
        raise IngestionError(f"no class directories with train/good under {root}")
    return DatasetIndex(root=root, classes=classes)


def _find_mask(class_dir: Path, defect: str, image_path: Path) -> Path:
    gt_dir = class_dir / "ground_truth" / defect
    for candidate in (
        gt_dir / f"{image_path.stem}_mask{image_path.suffix}",
        gt_dir / f"{image_path.stem}_mask.png",
        gt_dir / f"{image_path.stem}.png",
        gt_dir / image_path.name,
    ):
        if candidate.is_file():
            return candidate
    raise IngestionError(
        f"missing ground-truth mask for {image_path} (looked in {gt_dir})"
    )


def dataset_hash(index: DatasetIndex) -> str:
    """Stable digest over the indexed relative paths and file sizes."""
    digest = hashlib.sha256()
    paths: list[Path] = []
    for cls in index.classes.values():
        paths.extend(cls.train)
        for item in cls.test:
            paths.append(item.image)
            if item.mask is not None:
                paths.append(item.mask)
    for p in sorted(paths):
        digest.update(str(p.relative_to(index.root)).encode())
        digest.update(str(p.stat().st_size).encode())
    return digest.hexdigest()


def load_image(path) -> np.ndarray:
    """Read an image file into a float64 RGB array in [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def load_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        return (np.asarray(img.convert("L")) > 0).astype(np.uint8)


def save_image(array: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(array), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path)


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(((np.asarray(mask) > 0) * 255).astype(np.uint8)).save(path)


class ImageCorpus:
    """Training-split images with cached geometry preprocessing.

    Images are resized/cropped to the backbone geometry and kept in [0, 1]
    (synthesis happens in image space; normalization is applied afterwards).
    Foreground masks are computed once per image with the per-class method.
    """

    def __init__(
        self,
        index: DatasetIndex,
        spec: BackboneSpec,
        synth_config: SynthesisConfig | None = None,
        cache_limit: int = 2000,
    ) -> None:
        self.spec = spec
        self.synth_config = synth_config or SynthesisConfig()
        self.items = index.train_items()
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._cache_enabled = len(self.items) <= cache_limit

    def __len__(self) -> int:
        return len(self.items)

    def get(self, idx: int) -> tuple[str, np.ndarray, np.ndarray]:
        """Return (class name, [0,1] image at input size, foreground mask)."""
        class_name, path = self.items[idx]
        if idx in self._cache:
            image, fg = self._cache[idx]
        else:
            image = preprocess(load_image(path), self.spec, normalize=False)
            fg = foreground_mask(image, self.synth_config.foreground_for(class_name))
            if self._cache_enabled:
                self._cache[idx] = (image, fg)
        return class_name, image, fg

    def sample_batch(
        self, rng: np.random.Generator, batch_size: int
    ) -> tuple[list[str], np.ndarray, np.ndarray]:
        idxs = rng.integers(0, len(self.items), size=batch_size)
        names, images, fgs = [], [], []
        for i in idxs:
            name, image, fg = self.get(int(i))
            names.append(name)
            images.append(image)
            fgs.append(fg)
        return names, np.stack(images), np.stack(fgs)
