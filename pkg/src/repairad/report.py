"""Heatmap export and metrics reporting.

Heatmaps are three-panel PNGs (input, colored score map, overlay) with
display-only per-image min-max normalization; the raw scores live in ``.npy``
sidecars.  Reports render the metrics table as aligned text, as CSV, and as
per-class bar-chart figures.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ParameterError
from .metrics import IMAGE_METRIC_NAMES, PIXEL_METRIC_NAMES, MetricsReport

TABLE_COLUMNS = (
    ("image", "auroc", "I-AUROC"),
    ("image", "ap", "I-AP"),
    ("image", "f1max", "I-F1max"),
    ("pixel", "auroc", "P-AUROC"),
    ("pixel", "ap", "P-AP"),
    ("pixel", "f1max", "P-F1max"),
    ("pixel", "aupro", "P-AUPRO"),
)


def export_heatmap(image: np.ndarray, score_map: np.ndarray, out_path, scores_path=None) -> None:
    """Write input / score map / overlay side by side; optionally the raw scores.

    The score map is min-max normalized for display only; the ``.npy`` sidecar
    (when requested) stores the untouched values.
    """
    image = np.asarray(image)
    score_map = np.asarray(score_map, dtype=np.float64)
    if image.shape[:2] != score_map.shape:
        raise ParameterError(
            f"image {image.shape[:2]} and score map {score_map.shape} shapes differ"
        )
    span = score_map.max() - score_map.min()
    display = (score_map - score_map.min()) / span if span > 0 else np.zeros_like(score_map)

    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    axes[0].imshow(np.clip(image, 0.0, 1.0))
    axes[0].set_title("input")
    axes[1].imshow(display, cmap="jet", vmin=0.0, vmax=1.0)
    axes[1].set_title("anomaly score")
    axes[2].imshow(np.clip(image, 0.0, 1.0))
    axes[2].imshow(display, cmap="jet", vmin=0.0, vmax=1.0, alpha=0.5)
    axes[2].set_title("overlay")
    for ax in axes:
        ax.set_axis_off()
    fig.tight_layout()
    try:
        fig.savefig(out_path, dpi=120)
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {out_path}: {exc}") from exc
    finally:
        plt.close(fig)

    if scores_path is not None:
        np.save(scores_path, score_map)


def render_table(report: MetricsReport) -> str:
    """Aligned-text table in the reference column order, one row per class."""
    header = ["class"] + [label for _, _, label in TABLE_COLUMNS] + ["mAD"]
    rows = []
    for name, cm in report.per_class.items():
        rows.append([name] + [f"{getattr(cm, lvl)[key] * 100:.1f}" for lvl, key, _ in TABLE_COLUMNS] + [f"{cm.mad * 100:.1f}"])
    mean = report.mean
    rows.append(["mean"] + [f"{getattr(mean, lvl)[key] * 100:.1f}" for lvl, key, _ in TABLE_COLUMNS] + [f"{mean.mad * 100:.1f}"])

    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(len(header))]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(v.ljust(widths[i]) for i, v in enumerate(r)))
    return "\n".join(lines)


def write_report_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class"] + [label for _, _, label in TABLE_COLUMNS] + ["mAD"])
        for name, cm in list(report.per_class.items()) + [("mean", report.mean)]:
            writer.writerow(
                [name]
                + [f"{getattr(cm, lvl)[key]:.6f}" for lvl, key, _ in TABLE_COLUMNS]
                + [f"{cm.mad:.6f}"]
            )


def render_report_figures(report: MetricsReport, out_dir) -> list[Path]:
    """Bar charts of the per-class metrics, one figure per level plus mAD."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    classes = list(report.per_class.keys())
    written = []

    groups = (
        ("image", IMAGE_METRIC_NAMES, "image-level metrics"),
        ("pixel", PIXEL_METRIC_NAMES, "pixel-level metrics"),
    )
    for level, names, title in groups:
        fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(classes), 3.6))
        x = np.arange(len(classes))
        width = 0.8 / len(names)
        for j, metric in enumerate(names):
            values = [getattr(report.per_class[c], level)[metric] for c in classes]
            ax.bar(x + j * width, values, width, label=metric)
        ax.set_xticks(x + 0.4 - width / 2)
        ax.set_xticklabels(classes, rotation=30, ha="right")
        ax.set_ylim(0.0, 1.05)
        ax.set_title(title)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"metrics_{level}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    fig, ax = plt.subplots(figsize=(1.8 + 0.9 * (len(classes) + 1), 3.2))
    names = classes + ["mean"]
    values = [report.per_class[c].mad for c in classes] + [report.mean.mad]
    ax.bar(np.arange(len(names)), values, color="steelblue")
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("mAD")
    fig.tight_layout()
    path = out_dir / "metrics_mad.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written
