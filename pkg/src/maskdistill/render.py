"""Figure rendering for explanation bundles and evaluation reports.

All figures go through the Agg backend straight to files. Heatmaps use a
fixed monotone colormap built from the anchor table below (documented in the
README) so overlays are reproducible across machines and matplotlib
versions.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import ListedColormap

# Anchor points (position, r, g, b) of the saliency colormap; luminance
# rises monotonically so print-outs and colorbars stay readable.
COLORMAP_TABLE = (
    (0.00, 0, 0, 0),
    (0.25, 64, 0, 96),
    (0.50, 192, 48, 32),
    (0.75, 255, 160, 32),
    (1.00, 255, 255, 224),
)


def saliency_colormap(levels=256):
    anchors = np.asarray(COLORMAP_TABLE, dtype=np.float64)
    pos = np.linspace(0.0, 1.0, levels)
    rgb = np.stack([np.interp(pos, anchors[:, 0], anchors[:, 1 + c] / 255.0)
                    for c in range(3)], axis=1)
    return ListedColormap(rgb, name="maskdistill-ember")


def apply_colormap(values):
    """Map a [0, 1] grid to (H, W, 3) floats by interpolating the anchor
    table directly (exact at the anchors, unlike a quantized LUT)."""
    anchors = np.asarray(COLORMAP_TABLE, dtype=np.float64)
    flat = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0).ravel()
    rgb = np.stack([np.interp(flat, anchors[:, 0], anchors[:, 1 + c] / 255.0)
                    for c in range(3)], axis=1)
    return rgb.reshape(np.shape(values) + (3,))


def to_gray_rgb(image):
    gray = np.asarray(image, dtype=np.float64).mean(axis=2)
    return np.repeat(gray[..., None], 3, axis=2)


def render_heatmap_overlay(image, saliency, path, alpha=0.55):
    """Blend a normalized saliency heatmap over the grayscale input."""
    sal = np.asarray(saliency, dtype=np.float64)
    lo, hi = sal.min(), sal.max()
    norm = np.zeros_like(sal) if hi == lo else (sal - lo) / (hi - lo)
    blend = (1.0 - alpha) * to_gray_rgb(image) + alpha * apply_colormap(norm)
    plt.imsave(path, np.clip(blend, 0.0, 1.0))


def render_explanation_panel(image, mask, binary, path):
    """Input / continuous mask / binarized mask, side by side."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    axes[0].imshow(to_gray_rgb(image), vmin=0, vmax=1)
    axes[0].set_title("input")
    im = axes[1].imshow(mask, cmap=saliency_colormap(), vmin=0, vmax=1)
    axes[1].set_title("mask")
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    axes[2].imshow(binary, cmap="gray", vmin=0, vmax=1)
    axes[2].set_title("binarized")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_loss_curves(history, path):
    """Train/val total loss per epoch from an Explanation history."""
    epochs = [h[0] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [h[1] for h in history], label="train", marker="o", ms=3)
    ax.plot(epochs, [h[2] for h in history], label="val", marker="s", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_deletion_curves(curves, path):
    """One deletion curve per method: {label: DeletionCurve}."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, curve in sorted(curves.items()):
        ax.plot(curve.fractions, curve.scores, label=f"{label} (auc {curve.auc:.3f})")
    ax.set_xlabel("fraction of pixels removed")
    ax.set_ylabel("target score")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
