"""Shared fixtures: the toy corpus and lazily trained runs reused across tests."""

import dataclasses
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from repairad.backbone import normalize_images, preprocess, toy_backbone
from repairad.dataset import ImageCorpus, load_image, load_mask
from repairad.metrics import auroc, average_precision, f1_max
from repairad.scoring import ScoringConfig, score_images
from repairad.toydata import generate_toy_corpus, toy_config
from repairad.trainer import train_stage1, train_stage2


@pytest.fixture(scope="session")
def toy_index(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy-corpus")
    return generate_toy_corpus(root, seed=0)


@pytest.fixture(scope="session")
def toy_encoder():
    return toy_backbone(seed=0)


@pytest.fixture(scope="session")
def toy_corpus(toy_index, toy_encoder):
    return ImageCorpus(toy_index, toy_encoder.spec, toy_config().synthesis.build())


@dataclasses.dataclass
class TrainedRun:
    config: object
    net: object
    seg: object
    stage1_log: object
    stage2_log: object
    train_seconds: float


def _make_config(variant: str, seed: int):
    config = toy_config()
    config.trainer.seed = seed
    if variant == "nrar-only":
        config.repair_net.mask_ratio = 0.0
    elif variant == "baseline":
        config.repair_net.mask_ratio = 0.0
        config.trainer.use_nrar = False
    elif variant != "full":
        raise ValueError(variant)
    return config


@pytest.fixture(scope="session")
def trained_runs(toy_corpus, toy_encoder):
    """Lazily trained (variant, seed) runs shared by trainer and acceptance tests."""
    cache: dict[tuple[str, int], TrainedRun] = {}

    def get(variant: str, seed: int) -> TrainedRun:
        key = (variant, seed)
        if key not in cache:
            config = _make_config(variant, seed)
            start = time.monotonic()
            net, log1 = train_stage1(toy_corpus, toy_encoder, config)
            seg, log2 = (None, None)
            if variant == "full":
                seg, log2 = train_stage2(toy_corpus, toy_encoder, net, config)
            cache[key] = TrainedRun(
                config=config,
                net=net,
                seg=seg,
                stage1_log=log1,
                stage2_log=log2,
                train_seconds=time.monotonic() - start,
            )
        return cache[key]

    return get


@dataclasses.dataclass
class RunEvaluation:
    """Pooled test-set metrics of a trained run on the toy corpus."""

    image_auroc: float
    image_ap: float
    pixel_auroc: float
    pixel_ap: float
    pixel_f1max: float
    gap_ratio_inside_outside: float


@pytest.fixture(scope="session")
def evaluate_run(toy_index, toy_encoder):
    """Score every toy test image and pool image/pixel metrics."""

    def evaluate(net, seg, lambda1: float, lambda2: float) -> RunEvaluation:
        grid = toy_encoder.spec.grid_size
        patch = toy_encoder.spec.patch_size
        scoring = ScoringConfig(lambda1=lambda1, lambda2=lambda2)
        image_scores, image_labels, maps, gts = [], [], [], []
        inside, outside = [], []
        sample_index = 0
        for cls in toy_index.classes.values():
            for item in cls.test:
                display = preprocess(load_image(item.image), toy_encoder.spec, normalize=False)
                scored = score_images(
                    toy_encoder,
                    net,
                    seg,
                    normalize_images(display, toy_encoder.spec),
                    [sample_index],
                    scoring,
                )[0]
                sample_index += 1
                image_scores.append(scored.score)
                image_labels.append(int(item.is_anomalous))
                if item.mask is not None:
                    _, gt = preprocess(
                        load_image(item.image), toy_encoder.spec, mask=load_mask(item.mask)
                    )
                    token_gt = gt.reshape(grid, patch, grid, patch).max(axis=(1, 3)).astype(bool)
                    inside.append(scored.gap_map[token_gt].mean())
                    outside.append(scored.gap_map[~token_gt].mean())
                else:
                    gt = np.zeros(scored.score_map.shape, dtype=np.uint8)
                maps.append(scored.score_map)
                gts.append(gt)
        flat_scores = np.concatenate([m.ravel() for m in maps])
        flat_labels = np.concatenate([g.ravel() for g in gts])
        return RunEvaluation(
            image_auroc=auroc(image_scores, image_labels),
            image_ap=average_precision(image_scores, image_labels),
            pixel_auroc=auroc(flat_scores, flat_labels),
            pixel_ap=average_precision(flat_scores, flat_labels),
            pixel_f1max=f1_max(flat_scores, flat_labels),
            gap_ratio_inside_outside=float(np.mean(inside) / np.mean(outside)),
        )

    return evaluate
