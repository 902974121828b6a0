"""Command-line workbench: synth, train-stage1, train-stage2, infer, eval, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import normalize_images, preprocess
from .config import Config, apply_overrides, config_to_dict, default_config, load_config
from .dataset import ImageCorpus, dataset_hash, load_dataset, load_image, load_mask, save_image, save_mask
from .errors import ConfigurationError, IngestionError, MetricUndefinedError, ParameterError, StateError
from .metrics import ClassMetrics, MetricsReport, aggregate_report, compute_class_metrics
from .report import export_heatmap, render_report_figures, render_table, write_report_csv
from .repair_net import load_repair_checkpoint
from .scoring import ScoringConfig, score_images
from .segnet import load_seg_checkpoint
from .synthesis import AnomalySynthesizer
from .trainer import (
    STAGE1_CKPT,
    STAGE2_CKPT,
    train_stage1,
    train_stage2,
    write_run_manifest,
)

logger = logging.getLogger("repairad")

INDEX_FILE = "index.json"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repairad", description=__doc__)
    parser.add_argument("--version", action="version", version=f"repairad {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="YAML config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override a config entry (repeatable)",
        )
        p.add_argument("--data", type=Path, default=None, help="dataset root (overrides config)")
        return p

    p = common(sub.add_parser("synth", help="emit synthetic anomaly samples"))
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--class", dest="class_name", default=None)

    p = common(sub.add_parser("train-stage1", help="train bottleneck and decoder"))
    p.add_argument("--run", type=Path, required=True, help="run directory for checkpoints/logs")

    p = common(sub.add_parser("train-stage2", help="train the segmentation head"))
    p.add_argument("--run", type=Path, required=True)

    p = common(sub.add_parser("infer", help="score test images into sidecar files"))
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="sidecar directory")
    p.add_argument("--heatmaps", type=Path, default=None, help="also export heatmap PNGs here")

    p = common(sub.add_parser("eval", help="compute metrics from sidecars"))
    p.add_argument("--scores", type=Path, required=True, help="sidecar directory from infer")
    p.add_argument("--out", type=Path, required=True, help="metrics JSON output")

    p = sub.add_parser("report", help="render a metrics report")
    p.add_argument("--metrics", type=Path, required=True, help="metrics JSON from eval")
    p.add_argument("--out-dir", type=Path, required=True)
    return parser


def _load_config(args) -> Config:
    config = load_config(args.config) if args.config else default_config()
    if args.overrides:
        config = apply_overrides(config, args.overrides)
    if getattr(args, "data", None) is not None:
        config.dataset.root = str(args.data)
    return config


def _require_dataset(config: Config):
    if not config.dataset.root:
        raise ConfigurationError("no dataset root configured (use --data or dataset.root)")
    return load_dataset(config.dataset.root, layout=config.dataset.layout)


def cmd_synth(args) -> int:
    config = _load_config(args)
    index = _require_dataset(config)
    spec = config.backbone.spec()
    synthesizer = AnomalySynthesizer(config.synthesis.build())
    rng = np.random.default_rng(args.seed)

    items = index.train_items()
    if args.class_name is not None:
        items = [(c, p) for c, p in items if c == args.class_name]
        if not items:
            raise ConfigurationError(f"no train images for class {args.class_name!r}")

    args.out.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": args.seed, "toolkit_version": __version__, "samples": []}
    for i in range(args.count):
        class_name, path = items[int(rng.integers(len(items)))]
        image = preprocess(load_image(path), spec, normalize=False)
        sample = synthesizer.sample(image, rng, class_name=class_name)
        stem = f"{i:04d}_{class_name}"
        save_image(sample.anomalous, args.out / f"{stem}.png")
        save_mask(sample.mask, args.out / f"{stem}_mask.png")
        manifest["samples"].append(
            {
                "class": class_name,
                "source": str(path),
                "image": f"{stem}.png",
                "mask": f"{stem}_mask.png",
                "opacity": sample.opacity,
                "degenerate": sample.degenerate,
            }
        )
    (args.out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    logger.info("wrote %d synthetic samples to %s", args.count, args.out)
    return 0


def cmd_train_stage1(args) -> int:
    config = _load_config(args)
    index = _require_dataset(config)
    encoder = config.backbone.build()
    corpus = ImageCorpus(index, encoder.spec, config.synthesis.build())
    _, log = train_stage1(corpus, encoder, config, run_dir=args.run)
    write_run_manifest(args.run, config_to_dict(config), dataset_hash(index), __version__)
    logger.info("stage 1 done: final loss %.4f", log.losses()[-1] if log.entries else float("nan"))
    return 0


def cmd_train_stage2(args) -> int:
    config = _load_config(args)
    index = _require_dataset(config)
    encoder = config.backbone.build()
    stage1_path = args.run / STAGE1_CKPT
    if not stage1_path.exists():
        raise StateError(f"missing stage-1 checkpoint {stage1_path}; run train-stage1 first")
    repair, _ = load_repair_checkpoint(stage1_path)
    corpus = ImageCorpus(index, encoder.spec, config.synthesis.build())
    _, log = train_stage2(corpus, encoder, repair, config, run_dir=args.run)
    write_run_manifest(args.run, config_to_dict(config), dataset_hash(index), __version__)
    logger.info("stage 2 done: final loss %.4f", log.losses()[-1] if log.entries else float("nan"))
    return 0


def cmd_infer(args) -> int:
    config = _load_config(args)
    index = _require_dataset(config)
    encoder = config.backbone.build()
    stage1_path = args.run / STAGE1_CKPT
    if not stage1_path.exists():
        raise StateError(f"missing stage-1 checkpoint {stage1_path}")
    repair, _ = load_repair_checkpoint(stage1_path)
    seg = None
    stage2_path = args.run / STAGE2_CKPT
    if config.scoring.lambda2 > 0 and stage2_path.exists():
        seg, _, _ = load_seg_checkpoint(stage2_path)
    elif config.scoring.lambda2 > 0:
        logger.warning("no stage-2 checkpoint at %s; scoring from the feature gap only", stage2_path)

    scoring_cfg = ScoringConfig(
        lambda1=config.scoring.lambda1,
        lambda2=config.scoring.lambda2 if seg is not None else 0.0,
        top_count=config.scoring.top_count,
        fpr_limit=config.scoring.fpr_limit,
        mask_seed=config.scoring.mask_seed,
    )

    args.out.mkdir(parents=True, exist_ok=True)
    if args.heatmaps is not None:
        args.heatmaps.mkdir(parents=True, exist_ok=True)

    entries = []
    global_idx = 0
    batch_size = 16
    for class_name, cls in index.classes.items():
        batch_imgs, batch_meta = [], []

        def flush():
            nonlocal batch_imgs, batch_meta
            if not batch_imgs:
                return
            scored = score_images(
                encoder,
                repair,
                seg,
                np.stack(batch_imgs),
                [m["index"] for m in batch_meta],
                scoring_cfg,
            )
            for meta, result in zip(batch_meta, scored):
                stem = f"{meta['class']}__{meta['defect']}__{Path(meta['image']).stem}"
                sidecar = f"{stem}.npy"
                np.save(args.out / sidecar, result.score_map)
                entries.append(
                    {
                        "class": meta["class"],
                        "defect": meta["defect"],
                        "image": meta["image"],
                        "label": meta["label"],
                        "score": result.score,
                        "sidecar": sidecar,
                        "shape": list(result.score_map.shape),
                        "dtype": str(result.score_map.dtype),
                    }
                )
                if args.heatmaps is not None:
                    export_heatmap(meta["display"], result.score_map, args.heatmaps / f"{stem}.png")
            batch_imgs, batch_meta = [], []

        for item in cls.test:
            display = preprocess(load_image(item.image), encoder.spec, normalize=False)
            batch_imgs.append(normalize_images(display, encoder.spec))
            batch_meta.append(
                {
                    "class": class_name,
                    "defect": item.defect,
                    "image": str(item.image.relative_to(index.root)),
                    "label": int(item.is_anomalous),
                    "index": global_idx,
                    "display": display,
                }
            )
            global_idx += 1
            if len(batch_imgs) >= batch_size:
                flush()
        flush()

    payload = {
        "toolkit_version": __version__,
        "input_size": encoder.spec.input_size,
        "mask_seed": scoring_cfg.mask_seed,
        "images": entries,
    }
    (args.out / INDEX_FILE).write_text(json.dumps(payload, indent=2))
    logger.info("scored %d test images into %s", len(entries), args.out)
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    index = _require_dataset(config)
    index_path = args.scores / INDEX_FILE
    if not index_path.exists():
        raise StateError(f"missing {index_path}; run infer first")
    payload = json.loads(index_path.read_text())
    spec = config.backbone.spec()

    by_class: dict[str, dict[str, list]] = {}
    for entry in payload["images"]:
        bucket = by_class.setdefault(
            entry["class"], {"scores": [], "labels": [], "maps": [], "gts": []}
        )
        score_map = np.load(args.scores / entry["sidecar"])
        image_path = index.root / entry["image"]
        item = _find_test_item(index, entry["class"], image_path)
        if item.mask is not None:
            _, gt = preprocess(load_image(image_path), spec, mask=load_mask(item.mask))
        else:
            gt = np.zeros(score_map.shape, dtype=np.uint8)
        bucket["scores"].append(float(entry["score"]))
        bucket["labels"].append(int(entry["label"]))
        bucket["maps"].append(score_map)
        bucket["gts"].append(gt)

    per_class = {}
    for name, data in by_class.items():
        per_class[name] = compute_class_metrics(
            data["scores"], data["labels"], data["maps"], data["gts"], fpr_limit=config.scoring.fpr_limit
        )
    report = aggregate_report(per_class)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps({**report.to_dict(), "fpr_limit": config.scoring.fpr_limit}, indent=2))
    print(render_table(report))
    return 0


def _find_test_item(index, class_name: str, image_path: Path):
    cls = index.classes.get(class_name)
    if cls is None:
        raise IngestionError(f"class {class_name!r} not in dataset")
    for item in cls.test:
        if item.image == image_path:
            return item
    raise IngestionError(f"test image {image_path} not in dataset index")


def cmd_report(args) -> int:
    data = json.loads(args.metrics.read_text())
    per_class = {
        name: ClassMetrics(image=d["image"], pixel=d["pixel"])
        for name, d in data["per_class"].items()
    }
    report = MetricsReport(
        per_class=per_class,
        mean=ClassMetrics(image=data["mean"]["image"], pixel=data["mean"]["pixel"]),
    )
    args.out_dir.mkdir(parents=True, exist_ok=True)
    table = render_table(report)
    (args.out_dir / "metrics_table.txt").write_text(table + "\n")
    write_report_csv(report, args.out_dir / "metrics.csv")
    figures = render_report_figures(report, args.out_dir)
    print(table)
    logger.info("wrote table, CSV, and %d figures to %s", len(figures), args.out_dir)
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "report": cmd_report,
}


def run_cli(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (
        ParameterError,
        ConfigurationError,
        StateError,
        IngestionError,
        MetricUndefinedError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    entry()
