"""SVG/PNG figures: ROC curves, learning curves, confusion matrices, feature maps.

Output is byte-stable for identical inputs: the SVG id salt is fixed and the
creation date is omitted from the file metadata.
"""
import io
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from hqcnn.cache import atomic_write  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "hqcnn"
matplotlib.rcParams["svg.fonttype"] = "none"


def _save(fig, path, fmt: str):
    buf = io.BytesIO()
    metadata = {"Date": None} if fmt == "svg" else {"Software": None}
    fig.savefig(buf, format=fmt, metadata=metadata)
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def roc_svg(curves: dict, path, title: str = "ROC"):
    """One line per entry of ``curves``: name -> (fpr, tpr, auc)."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, 1], [0, 1], color="grey", linestyle="--", linewidth=0.8)
    for name, (fpr, tpr, area) in curves.items():
        ax.plot(fpr, tpr, label=f"{name} (AUC = {area:.3f})")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right")
    _save(fig, path, "svg")


def learning_curve_svg(log: Sequence, path, title: str = "Learning curve"):
    """Accuracy and loss per epoch; accuracy panel fixed to [0, 1]."""
    epochs = [r.epoch for r in log]
    fig, (acc_ax, loss_ax) = plt.subplots(1, 2, figsize=(10, 4))
    acc_ax.plot(epochs, [r.train_acc for r in log], label="train")
    loss_ax.plot(epochs, [r.train_loss for r in log], label="train")
    if any(not np.isnan(r.test_acc) for r in log):
        acc_ax.plot(epochs, [r.test_acc for r in log], label="test")
        loss_ax.plot(epochs, [r.test_loss for r in log], label="test")
    acc_ax.set_ylim(0.0, 1.0)
    acc_ax.set_xlabel("epoch")
    acc_ax.set_ylabel("accuracy")
    loss_ax.set_xlabel("epoch")
    loss_ax.set_ylabel("loss")
    acc_ax.legend()
    loss_ax.legend()
    fig.suptitle(title)
    _save(fig, path, "svg")


def confusion_matrix_svg(counts: np.ndarray, class_names: Sequence[str], path, title: str = "Confusion matrix"):
    counts = np.asarray(counts)
    fig, ax = plt.subplots(figsize=(1.6 * len(class_names) + 2, 1.6 * len(class_names) + 1.5))
    ax.imshow(counts, cmap="Blues")
    ticks = range(len(class_names))
    ax.set_xticks(ticks, class_names)
    ax.set_yticks(ticks, class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    threshold = counts.max() / 2 if counts.size else 0
    for t in ticks:
        for p in ticks:
            ax.text(p, t, str(counts[t, p]), ha="center", va="center",
                    color="white" if counts[t, p] > threshold else "black")
    ax.set_title(title)
    _save(fig, path, "svg")


def feature_map_png(image: np.ndarray, feature_map: np.ndarray, path, title: str = ""):
    """Input image next to each channel of its feature map."""
    channels = feature_map.shape[-1]
    fig, axes = plt.subplots(1, channels + 1, figsize=(2.2 * (channels + 1), 2.6))
    axes[0].imshow(image, cmap="gray", vmin=0.0, vmax=1.0)
    axes[0].set_title("input")
    for k in range(channels):
        axes[k + 1].imshow(feature_map[..., k], cmap="viridis")
        axes[k + 1].set_title(f"qubit {k}")
    for ax in axes:
        ax.axis("off")
    if title:
        fig.suptitle(title)
    _save(fig, path, "png")
