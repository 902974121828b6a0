"""Two-stage training loop.

Stage 1 trains the bottleneck and decoder on paired normal/pseudo-anomalous
batches with the reconstruction-plus-repair cosine loss.  Stage 2 freezes
them and fits the segmentation head with focal loss against the synthetic
masks.  Both stages log per-iteration losses and parameter checksums at the
stage boundaries; a fixed seed with single-worker loading reproduces a run
bit for bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone, normalize_images, param_checksum
from .config import Config
from .dataset import ImageCorpus
from .errors import ConfigurationError, StateError
from .optim import make_optimizer
from .repair_net import (
    FeatureMask,
    RepairNet,
    discrepancy,
    group,
    make_feature_mask,
    nrar_loss,
    save_repair_checkpoint,
)
from .segnet import build_seg_head, focal_loss, save_seg_checkpoint, similarity_feature
from .synthesis import AnomalySynthesizer, SynthesisConfig

logger = logging.getLogger(__name__)

STAGE1_CKPT = "stage1.ckpt"
STAGE2_CKPT = "stage2.ckpt"
LOG_FILE = "log.jsonl"
MANIFEST_FILE = "manifest.json"


@dataclasses.dataclass
class TrainLog:
    """Per-iteration losses plus wall clock and boundary checksums."""

    stage: str
    entries: list[dict] = dataclasses.field(default_factory=list)
    checksums_before: dict[str, str] = dataclasses.field(default_factory=dict)
    checksums_after: dict[str, str] = dataclasses.field(default_factory=dict)

    def append(self, iteration: int, loss: float, wall_time: float) -> None:
        self.entries.append(
            {"stage": self.stage, "iteration": iteration, "loss": loss, "wall_time": wall_time}
        )

    def losses(self) -> list[float]:
        return [e["loss"] for e in self.entries]

    def write_jsonl(self, path, append: bool = False) -> None:
        mode = "a" if append else "w"
        with open(path, mode) as fh:
            fh.write(json.dumps({"stage": self.stage, "event": "start", "checksums": self.checksums_before}) + "\n")
            for entry in self.entries:
                fh.write(json.dumps(entry) + "\n")
            fh.write(json.dumps({"stage": self.stage, "event": "end", "checksums": self.checksums_after}) + "\n")


def _synthesize_batch(
    synthesizer: AnomalySynthesizer,
    names: list[str],
    images: np.ndarray,
    foregrounds: np.ndarray,
    rng: np.random.Generator,
):
    """Pseudo-anomalous versions of a batch; degenerate draws are dropped."""
    anomalous, masks, keep = [], [], []
    for i, name in enumerate(names):
        sample = synthesizer.sample(images[i], rng, class_name=name, foreground=foregrounds[i])
        if sample.degenerate:
            continue
        anomalous.append(sample.anomalous)
        masks.append(sample.mask)
        keep.append(i)
    if not keep:
        return None, None, []
    return np.stack(anomalous), np.stack(masks), keep


def train_stage1(
    corpus: ImageCorpus,
    encoder: Backbone,
    config: Config,
    run_dir: str | Path | None = None,
) -> tuple[RepairNet, TrainLog]:
    """Optimize the bottleneck and decoder with the cosine objective.

    Per iteration one normal batch is drawn across all classes, its
    pseudo-anomalous twin is synthesized from the same images, and both pass
    through the masked bottleneck/decoder.  Only bottleneck and decoder
    parameters receive gradients; the encoder checksum is asserted unchanged.
    """
    if len(corpus) == 0:
        raise ConfigurationError("training corpus is empty")
    stage = config.trainer.stage1
    seed = config.trainer.seed
    rng = np.random.default_rng(seed)

    net = RepairNet(
        encoder.spec,
        drop_rate=config.repair_net.drop_rate,
        mask_ratio=config.repair_net.mask_ratio,
        init_seed=seed,
    )
    net.seed_dropout(seed + 1)
    optimizer = make_optimizer(
        stage.optimizer,
        net.parameters(),
        lr=stage.lr,
        betas=tuple(stage.betas),
        weight_decay=stage.weight_decay,
    )
    synthesizer = AnomalySynthesizer(config.synthesis.build())
    grid = (encoder.spec.grid_size, encoder.spec.grid_size)

    log = TrainLog(stage="stage1")
    log.checksums_before = {"encoder": param_checksum(encoder), "repair_net": param_checksum(net)}
    start = time.monotonic()

    for iteration in range(stage.iterations):
        names, images, fgs = corpus.sample_batch(rng, stage.batch_size)
        anomalous, _, keep = _synthesize_batch(synthesizer, names, images, fgs, rng)

        stack_n = encoder.extract(normalize_images(images, encoder.spec))
        mask_n = make_feature_mask(grid, net.mask_ratio, rng, batch_size=len(names))
        decoded_n = net(stack_n, mask_n, mode="train")
        grouped_en = group(stack_n)
        grouped_dn = group(decoded_n)

        if config.trainer.use_nrar and keep:
            stack_a = encoder.extract(normalize_images(anomalous, encoder.spec))
            mask_a = make_feature_mask(grid, net.mask_ratio, rng, batch_size=len(keep))
            decoded_a = net(stack_a, mask_a, mode="train")
            grouped_en_kept = group(_subset_stack(stack_n, keep))
            loss = nrar_loss(grouped_en_kept, _subset_grouped(grouped_dn, keep), group(decoded_a))
        else:
            loss = discrepancy(grouped_en, grouped_dn)

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        log.append(iteration, float(loss.detach()), time.monotonic() - start)

    log.checksums_after = {"encoder": param_checksum(encoder), "repair_net": param_checksum(net)}
    if log.checksums_after["encoder"] != log.checksums_before["encoder"]:
        raise StateError("encoder parameters changed during stage 1")

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_repair_checkpoint(net, run_dir / STAGE1_CKPT, iteration=stage.iterations)
        log.write_jsonl(run_dir / LOG_FILE)
    return net, log


def _subset_stack(stack, keep):
    from .backbone import FeatureStack

    idx = torch.as_tensor(keep, dtype=torch.long)
    return FeatureStack(
        maps=tuple(m.index_select(0, idx) for m in stack.maps), grid=stack.grid, source=stack.source
    )


def _subset_grouped(grouped, keep):
    from .repair_net import GroupedFeatures

    idx = torch.as_tensor(keep, dtype=torch.long)
    return GroupedFeatures(
        low=grouped.low.index_select(0, idx),
        high=grouped.high.index_select(0, idx),
        grid=grouped.grid,
    )


def train_stage2(
    corpus: ImageCorpus,
    encoder: Backbone,
    repair: RepairNet,
    config: Config,
    run_dir: str | Path | None = None,
) -> tuple[torch.nn.Module, TrainLog]:
    """Fit the segmentation head on synthetic masks with everything else frozen."""
    if len(corpus) == 0:
        raise ConfigurationError("training corpus is empty")
    stage = config.trainer.stage2
    seed = config.trainer.seed
    rng = np.random.default_rng(seed + 100_003)

    for p in repair.parameters():
        p.requires_grad_(False)

    seg = build_seg_head(encoder.spec, variant=config.segnet.variant, init_seed=seed)
    optimizer = make_optimizer(
        stage.optimizer,
        seg.parameters(),
        lr=stage.lr,
        betas=tuple(stage.betas),
        weight_decay=stage.weight_decay,
    )
    synthesizer = AnomalySynthesizer(config.synthesis.build())
    grid = (encoder.spec.grid_size, encoder.spec.grid_size)

    log = TrainLog(stage="stage2")
    log.checksums_before = {
        "encoder": param_checksum(encoder),
        "repair_net": param_checksum(repair),
        "seg_head": param_checksum(seg),
    }
    start = time.monotonic()

    for iteration in range(stage.iterations):
        names, images, fgs = corpus.sample_batch(rng, stage.batch_size)
        anomalous, masks, keep = _synthesize_batch(synthesizer, names, images, fgs, rng)
        if not keep:
            log.append(iteration, float("nan"), time.monotonic() - start)
            continue

        with torch.no_grad():
            stack_a = encoder.extract(normalize_images(anomalous, encoder.spec))
            feat_mask = make_feature_mask(grid, repair.mask_ratio, rng, batch_size=len(keep))
            decoded_a = repair(stack_a, feat_mask, mode="eval")
            features = similarity_feature(group(stack_a), group(decoded_a))

        pred = seg(features)
        loss = focal_loss(pred, masks, alpha_t=config.segnet.alpha_t, gamma=config.segnet.gamma)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        log.append(iteration, float(loss.detach()), time.monotonic() - start)

    log.checksums_after = {
        "encoder": param_checksum(encoder),
        "repair_net": param_checksum(repair),
        "seg_head": param_checksum(seg),
    }
    for name in ("encoder", "repair_net"):
        if log.checksums_after[name] != log.checksums_before[name]:
            raise StateError(f"{name} parameters changed during stage 2")

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_seg_checkpoint(seg, config.segnet.variant, run_dir / STAGE2_CKPT, iteration=stage.iterations)
        log.write_jsonl(run_dir / LOG_FILE, append=(run_dir / LOG_FILE).exists())
    return seg, log


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def write_run_manifest(
    run_dir,
    config_dict: dict,
    dataset_digest: str,
    toolkit_version: str,
) -> Path:
    """Snapshot everything needed to reproduce the run bit for bit."""
    run_dir = Path(run_dir)
    checkpoints = {}
    for name in (STAGE1_CKPT, STAGE2_CKPT):
        path = run_dir / name
        if path.exists():
            checkpoints[name] = file_sha256(path)
    manifest = {
        "config": config_dict,
        "seed": config_dict.get("trainer", {}).get("seed"),
        "dataset_hash": dataset_digest,
        "checkpoints": checkpoints,
        "toolkit_version": toolkit_version,
    }
    path = run_dir / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path
