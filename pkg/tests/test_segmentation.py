import numpy as np
import pytest

from maskdistill import gridio
from maskdistill.segmentation import (QuickShiftConfig, SegmentationConfigError,
                                      quick_shift, save_segment_map, segment_stats)


def brute_force_quick_shift(image, cfg):
    """Direct evaluation of the linking rule with plain loops."""
    image = image[..., None] if image.ndim == 2 else image
    h, w, c = image.shape
    n = h * w
    feats = np.zeros((n, 2 + c))
    for r in range(h):
        for col in range(w):
            feats[r * w + col, 0] = r
            feats[r * w + col, 1] = col
            feats[r * w + col, 2:] = image[r, col] * cfg.ratio
    dens = np.zeros(n)
    for p in range(n):
        for q in range(n):
            d2 = ((feats[p] - feats[q]) ** 2).sum()
            dens[p] += np.exp(-d2 / (2 * cfg.kernel_size ** 2))
    qd = np.floor(dens / (1e-9 * dens.max()))
    parent = -np.ones(n, dtype=int)
    for p in range(n):
        best, best_d2 = -1, np.inf
        for q in range(n):
            if q == p:
                continue
            d2 = ((feats[p] - feats[q]) ** 2).sum()
            higher = qd[q] > qd[p] or (qd[q] == qd[p] and q < p)
            if higher and d2 <= cfg.max_dist ** 2 and d2 < best_d2:
                best, best_d2 = q, d2
        parent[p] = best
    root = np.arange(n)
    for _ in range(n):
        nxt = np.where(parent[root] >= 0, parent[root], root)
        if (nxt == root).all():
            break
        root = nxt
    return root.reshape(h, w)


def test_constant_image_single_segment():
    seg = quick_shift(np.full((8, 8), 0.4), QuickShiftConfig(kernel_size=2, max_dist=4))
    assert seg.n_segments == 1
    assert np.all(seg.labels == 1)


def test_two_halves_split_exactly():
    image = np.zeros((8, 8))
    image[:, 4:] = 1.0
    cfg = QuickShiftConfig(kernel_size=1.0, max_dist=2.0, ratio=1.0)
    seg = quick_shift(image, cfg)
    assert seg.n_segments == 2
    assert len(set(seg.labels[:, :4].ravel())) == 1
    assert len(set(seg.labels[:, 4:].ravel())) == 1
    assert seg.labels[0, 0] != seg.labels[0, 7]

    roots = brute_force_quick_shift(image, cfg)
    # same partition as the direct rule evaluation
    for a in range(8 * 8):
        for b in range(8 * 8):
            same_fast = seg.labels.ravel()[a] == seg.labels.ravel()[b]
            same_slow = roots.ravel()[a] == roots.ravel()[b]
            assert same_fast == same_slow


def test_matches_brute_force_on_random_images():
    rng = np.random.default_rng(9)
    for trial in range(4):
        image = rng.random((5, 6))
        cfg = QuickShiftConfig(kernel_size=0.8, max_dist=2.0, ratio=0.7)
        seg = quick_shift(image, cfg)
        roots = brute_force_quick_shift(image, cfg)
        fast = seg.labels.ravel()
        slow = roots.ravel()
        for a in range(30):
            for b in range(a):
                assert (fast[a] == fast[b]) == (slow[a] == slow[b]), \
                    f"trial {trial}: pixels {a},{b} disagree"


def test_max_dist_below_one_isolates_every_pixel():
    image = np.zeros((6, 5))
    image[:, 3:] = 1.0
    seg = quick_shift(image, QuickShiftConfig(kernel_size=0.5, max_dist=0.9))
    assert seg.n_segments == 30


def test_partition_property_random_images():
    rng = np.random.default_rng(0)
    for _ in range(25):
        h, w = rng.integers(4, 12, 2)
        image = rng.random((h, w, rng.integers(1, 4)))
        seg = quick_shift(image, QuickShiftConfig(kernel_size=1.0, max_dist=3.0))
        labels = seg.labels
        assert labels.shape == (h, w)
        assert labels.min() == 1
        assert labels.max() == seg.n_segments
        assert set(np.unique(labels)) == set(range(1, seg.n_segments + 1))


def test_monotonicity_in_max_dist():
    rng = np.random.default_rng(1)
    image = rng.random((10, 10))
    counts = [quick_shift(image, QuickShiftConfig(1.0, md)).n_segments
              for md in (1.0, 2.0, 4.0, 8.0)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_determinism():
    rng = np.random.default_rng(2)
    image = rng.random((9, 9))
    cfg = QuickShiftConfig(1.0, 3.0, 0.8, seed=5)
    a = quick_shift(image, cfg)
    b = quick_shift(image, cfg)
    assert np.array_equal(a.labels, b.labels)


def test_segment_stats_single_segment():
    seg = quick_shift(np.full((4, 4), 0.2), QuickShiftConfig(1.0, 2.0))
    stats = segment_stats(seg)
    assert stats == [{"label": 1, "size": 16, "bbox": (0, 3, 0, 3)}]


def test_segment_stats_two_halves():
    image = np.zeros((8, 8))
    image[:, 4:] = 1.0
    seg = quick_shift(image, QuickShiftConfig(1.0, 2.0))
    sizes = sorted(s["size"] for s in segment_stats(seg))
    assert sizes == [32, 32]


def test_segment_sizes_sum_to_pixel_count():
    rng = np.random.default_rng(3)
    for _ in range(10):
        image = rng.random((7, 9))
        seg = quick_shift(image, QuickShiftConfig(1.0, 2.5))
        assert sum(s["size"] for s in segment_stats(seg)) == 63
        assert seg.sizes().sum() == 63


def test_config_validation():
    with pytest.raises(SegmentationConfigError):
        QuickShiftConfig(kernel_size=0.0)
    with pytest.raises(SegmentationConfigError):
        QuickShiftConfig(kernel_size=2.0, max_dist=1.0)
    with pytest.raises(SegmentationConfigError):
        QuickShiftConfig(ratio=1.5)
    with pytest.raises(SegmentationConfigError):
        quick_shift(np.zeros((2, 2, 5)), QuickShiftConfig())


def test_segment_map_export(tmp_path):
    image = np.zeros((8, 8))
    image[:, 4:] = 1.0
    seg = quick_shift(image, QuickShiftConfig(1.0, 2.0))
    path = tmp_path / "segments.pgm"
    save_segment_map(seg, path)
    grid = gridio.load_image(path)
    assert np.array_equal(np.rint(grid[..., 0] * seg.n_segments).astype(int), seg.labels)
