"""Report rendering: JSON/CSV summaries plus matplotlib figures.

Every CLI stage that produces metrics writes its numbers as delimited files
and renders the matching figure next to them.
"""

import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .datasets import BASE_COLORS


def _ensure_dir(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_csv(path, rows: list, fieldnames=None):
    """List of dicts -> CSV."""
    path = _ensure_dir(path)
    if not rows:
        path.write_text("")
        return path
    fieldnames = fieldnames or list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in fieldnames})
    return path


def save_iou_report(report, outdir, class_names=None, stem="report"):
    """IouReport -> report.json, report.csv and a per-class IOU bar chart."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / f"{stem}.json").write_text(json.dumps(report.to_dict(), indent=2))

    rows = []
    for c, v in sorted(report.per_class.items()):
        name = class_names[c] if class_names and c < len(class_names) else str(c)
        rows.append({"class": c, "name": name,
                     "iou": "" if v is None else f"{v:.6f}",
                     "weight": f"{report.class_weights[c]:.6f}",
                     "gt_pixels": report.pixel_counts[c]})
    write_csv(outdir / f"{stem}.csv", rows)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    classes = [r["name"] for r in rows]
    values = [float(r["iou"]) if r["iou"] else 0.0 for r in rows]
    ax.bar(classes, values, color="#4878a8")
    ax.axhline(report.weighted, color="#c44e52", linestyle="--",
               label=f"weighted {report.weighted:.3f}")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("IOU")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(outdir / f"{stem}_iou.png", dpi=120)
    plt.close(fig)
    return outdir


def save_loss_curve(trace, path, title="training loss"):
    """Loss trace (list of floats or dicts) -> PNG curve."""
    path = _ensure_dir(path)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if trace and isinstance(trace[0], dict):
        keys = [k for k in ("train_loss", "val_loss", "d_loss", "g_loss", "loss")
                if k in trace[0]]
        xs = [rec.get("epoch", rec.get("step", i)) for i, rec in enumerate(trace)]
        for key in keys:
            ax.plot(xs, [rec[key] for rec in trace], label=key)
        ax.legend()
    else:
        ax.plot(trace)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def class_color_image(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Label map -> RGB uint8 using the class palette (ignore -> magenta)."""
    palette = np.full((256, 3), 64, dtype=np.uint8)
    base = (BASE_COLORS * 255).astype(np.uint8)
    palette[:min(n_classes, len(base))] = base[:n_classes]
    palette[255] = (255, 0, 255)
    return palette[labels]


def save_prediction_panel(image, pred_labels, path, gt_labels=None, n_classes=4):
    """Side-by-side figure: input image, prediction, optional ground truth."""
    path = _ensure_dir(path)
    cols = 3 if gt_labels is not None else 2
    fig, axes = plt.subplots(1, cols, figsize=(3 * cols, 3.2))
    rgb = np.clip((np.asarray(image) + 1) / 2, 0, 1)
    axes[0].imshow(rgb)
    axes[0].set_title("image")
    axes[1].imshow(class_color_image(pred_labels, n_classes))
    axes[1].set_title("prediction")
    if gt_labels is not None:
        axes[2].imshow(class_color_image(gt_labels, n_classes))
        axes[2].set_title("ground truth")
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_label_efficiency_curve(points, path, reference=None):
    """points: [(n_labels, iou)], reference: optional (name, iou) horizontal line."""
    path = _ensure_dir(path)
    points = sorted(points)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([p[0] for p in points], [p[1] for p in points], "o-",
            label="supervised baseline")
    if reference is not None:
        ax.axhline(reference[1], color="#c44e52", linestyle="--", label=reference[0])
    ax.set_xlabel("ground-truth labels")
    ax.set_ylabel("weighted IOU")
    ax.set_xscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
