"""Quick-shift superpixel segmentation.

Mode seeking on the joint (row, col, ratio * color) feature space: every
pixel gets a Parzen density estimate under a Gaussian kernel, then links to
its nearest neighbor with higher density within ``max_dist``. Pixels without
such a neighbor are tree roots, and each tree becomes one segment. Density
ties are broken by flat pixel index (lower index counts as denser), which
makes the output fully deterministic: a constant image collapses to a single
segment instead of degenerating into per-pixel roots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SegmentationConfigError(ValueError):
    pass


@dataclass(frozen=True)
class QuickShiftConfig:
    """kernel_size is the density bandwidth and max_dist the maximum
    parent-link distance, both in pixels of the joint feature space;
    ratio in [0, 1] weighs color against spatial distance. seed is accepted
    for config compatibility but unused: tie-breaking is lexicographic."""

    kernel_size: float = 1.0
    max_dist: float = 4.0
    ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kernel_size <= 0:
            raise SegmentationConfigError(f"kernel_size must be > 0, got {self.kernel_size}")
        if self.max_dist < self.kernel_size:
            raise SegmentationConfigError(
                f"max_dist ({self.max_dist}) must be >= kernel_size ({self.kernel_size})")
        if not 0.0 <= self.ratio <= 1.0:
            raise SegmentationConfigError(f"ratio must be in [0, 1], got {self.ratio}")


@dataclass
class SegmentMap:
    """Labels are an (H, W) int array with values 1..n_segments forming a
    partition: every pixel carries exactly one label and every label occurs."""

    labels: np.ndarray
    n_segments: int

    @property
    def shape(self):
        return self.labels.shape

    def sizes(self):
        return np.bincount(self.labels.ravel(), minlength=self.n_segments + 1)[1:]

    def member_mask(self, label):
        return self.labels == label


def _features(image, ratio):
    h, w = image.shape[:2]
    rows, cols = np.mgrid[0:h, 0:w]
    chans = image.reshape(h, w, -1) * ratio
    feats = np.concatenate([rows[..., None], cols[..., None], chans], axis=2)
    return feats.reshape(h * w, -1)


def quick_shift(image, cfg=None):
    """Segment an (H, W) or (H, W, C) image; returns a SegmentMap.

    Works directly on the input channels (no color-space conversion) so
    grayscale images and spectrogram tensors take the same path.
    """
    cfg = cfg or QuickShiftConfig()
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise SegmentationConfigError("empty image")
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3 or image.shape[2] > 4:
        raise SegmentationConfigError(f"expected (H, W, C<=4) image, got shape {image.shape}")
    h, w = image.shape[:2]
    n = h * w
    feats = _features(image, cfg.ratio)
    inv2h2 = 1.0 / (2.0 * cfg.kernel_size ** 2)
    maxd2 = cfg.max_dist ** 2

    # Blockwise pairwise distances keep memory bounded on larger grids.
    block = max(1, min(n, (1 << 22) // max(n, 1)))
    sq = np.einsum("ij,ij->i", feats, feats)
    density = np.empty(n)
    for start in range(0, n, block):
        stop = min(start + block, n)
        d2 = _sqdist_block(feats, sq, start, stop)
        density[start:stop] = np.exp(-d2 * inv2h2).sum(axis=1)

    # Quantize densities so values that differ only by summation noise count
    # as tied, then break ties toward the lower flat index. The quantized
    # (density, -index) key is a strict total order: links always move up the
    # key, so trees cannot form cycles and plateaus stay deterministic.
    qdens = np.floor(density / (1e-9 * float(density.max()))).astype(np.int64)
    parent = np.full(n, -1, dtype=np.int64)
    idx = np.arange(n)
    for start in range(0, n, block):
        stop = min(start + block, n)
        d2 = _sqdist_block(feats, sq, start, stop)
        dens_p = qdens[start:stop, None]
        higher = (qdens[None, :] > dens_p) | (
            (qdens[None, :] == dens_p) & (idx[None, :] < idx[start:stop, None]))
        candidate = higher & (d2 <= maxd2)
        d2 = np.where(candidate, d2, np.inf)
        best = d2.argmin(axis=1)  # ties resolve to the lowest flat index
        has = np.isfinite(d2[np.arange(stop - start), best])
        parent[start:stop] = np.where(has, best, -1)

    # Follow links to the root of each tree.
    root = idx.copy()
    for _ in range(n):
        nxt = np.where(parent[root] >= 0, parent[root], root)
        if (nxt == root).all():
            break
        root = nxt

    # Relabel roots to 1..S in flat-index order.
    root_ids = np.unique(root)
    relabel = np.zeros(n, dtype=np.int64)
    relabel[root_ids] = np.arange(1, root_ids.size + 1)
    labels = relabel[root].reshape(h, w)
    return SegmentMap(labels=labels, n_segments=int(root_ids.size))


def _sqdist_block(feats, sq, start, stop):
    d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (feats[start:stop] @ feats.T)
    return np.maximum(d2, 0.0)


def segment_stats(seg):
    """Per-segment size and bounding box; sizes sum to H*W.

    Returns a list of dicts {"label", "size", "bbox"} with bbox as
    (row_min, row_max, col_min, col_max), inclusive.
    """
    stats = []
    for label in range(1, seg.n_segments + 1):
        rows, cols = np.nonzero(seg.labels == label)
        stats.append({
            "label": label,
            "size": int(rows.size),
            "bbox": (int(rows.min()), int(rows.max()), int(cols.min()), int(cols.max())),
        })
    return stats


def save_segment_map(seg, path):
    """Export labels as an ASCII graymap (P2, maxval = n_segments)."""
    h, w = seg.labels.shape
    lines = [f"P2\n{w} {h}\n{seg.n_segments}\n"]
    for r in range(h):
        lines.append(" ".join(str(v) for v in seg.labels[r]) + "\n")
    with open(path, "w") as fh:
        fh.writelines(lines)
