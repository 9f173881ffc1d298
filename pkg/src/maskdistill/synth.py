"""Synthetic inputs for desk-scale experiments.

Generates block-textured images with planted bright regions (inputs whose
salient region is known exactly) and small labeled shape datasets for
training the toy classifiers. All generators are seeded and deterministic.
"""

from __future__ import annotations

import numpy as np


def rect_mask(height, width, row0, col0, rect_h, rect_w):
    mask = np.zeros((height, width), dtype=bool)
    mask[row0:row0 + rect_h, col0:col0 + rect_w] = True
    return mask


def disc_mask(height, width, center_row, center_col, radius):
    rows, cols = np.mgrid[0:height, 0:width]
    return (rows - center_row) ** 2 + (cols - center_col) ** 2 <= radius ** 2


def block_texture(height, width, cell, rng, low=0.1, high=0.5):
    """Piecewise-constant background: a grid of cell x cell gray patches."""
    gh = -(-height // cell)
    gw = -(-width // cell)
    grid = rng.uniform(low, high, (gh, gw))
    return np.kron(grid, np.ones((cell, cell)))[:height, :width]


def planted_region_image(height, width, region, seed=0, cell=4,
                         fg=0.8, fg_span=0.15, channels=1):
    """Block-textured background with a brighter textured region planted.

    Region pixels take per-cell intensities in [fg - fg_span, fg + fg_span],
    so the region spans several superpixels rather than collapsing into one
    uniform segment. The region mask doubles as the ground-truth salient
    area for the region-mean oracles; returns an (H, W, C) array in [0, 1].
    """
    rng = np.random.default_rng(seed)
    base = block_texture(height, width, cell, rng)
    lining = block_texture(height, width, cell, rng,
                           low=fg - fg_span, high=fg + fg_span)
    base[region] = lining[region]
    return np.repeat(base[..., None], channels, axis=2)


def two_region_image(height, width, region_a, region_b, seed=0, cell=4,
                     fg_a=0.9, fg_b=0.65, fg_span=0.05, channels=1):
    """Block texture with two disjoint planted regions (sensitivity tasks)."""
    rng = np.random.default_rng(seed)
    base = block_texture(height, width, cell, rng)
    lining_a = block_texture(height, width, cell, rng,
                             low=fg_a - fg_span, high=fg_a + fg_span)
    lining_b = block_texture(height, width, cell, rng,
                             low=fg_b - fg_span, high=fg_b + fg_span)
    base[region_a] = lining_a[region_a]
    base[region_b] = lining_b[region_b]
    return np.repeat(base[..., None], channels, axis=2)


def make_shape_dataset(n_samples, size=16, noise=0.25, seed=0):
    """Labeled squares-vs-discs images for the toy classifier.

    Label 0 is a filled square, label 1 a filled disc, both at a random
    position over uniform background noise. Returns (X, y) with X shaped
    (n, size, size, 1) in [0, 1].
    """
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, noise, (n_samples, size, size))
    labels = rng.integers(0, 2, n_samples)
    side = max(3, size // 4)
    radius = float(side)  # disc covers ~pi*side^2, square side^2: classes differ in mass
    for i in range(n_samples):
        if labels[i] == 0:
            r0 = rng.integers(0, size - side + 1)
            c0 = rng.integers(0, size - side + 1)
            images[i, r0:r0 + side, c0:c0 + side] = 0.9
        else:
            margin = int(np.ceil(radius))
            cr = rng.integers(margin, size - margin)
            cc = rng.integers(margin, size - margin)
            images[i][disc_mask(size, size, cr, cc, radius)] = 0.9
    return images[..., None], labels


def demo_image(size=24, seed=7):
    """The bundled demo input: a disc and two squares planted on blocks.

    Several disjoint bright patches keep the black-box response multi-level
    across perturbations, which is the regime the joint training needs.
    """
    region = (disc_mask(size, size, 9, 8, 4.2)
              | rect_mask(size, size, 4, 16, 4, 4)
              | rect_mask(size, size, 16, 12, 4, 4))
    image = planted_region_image(size, size, region, seed=seed, cell=4,
                                 fg=0.9, fg_span=0.0)
    return image, region
