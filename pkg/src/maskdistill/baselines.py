"""Gradient-free baseline explainers sharing the black-box plumbing.

* RISE: random smooth masks, saliency = score-weighted mean of the masked
  inputs divided by the score sum, reduced to one plane by channel mean.
* LIME: weighted ridge regression from binary segment-mask rows to target
  scores; a segment's (negated) coefficient paints its pixels.
* Occlusion: slide a square window over the input, replace it with the fill
  value, and average the score drop over every window covering a pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .perturb import apply_segment_mask, fill_values


class DegenerateInputError(ValueError):
    """The black-box scores sum to zero; the RISE ratio is undefined."""


class SingularDesignError(ValueError):
    """The LIME normal matrix is numerically singular."""


@dataclass
class SaliencyMap:
    """An unnormalized (H, W) importance grid with its provenance."""

    values: np.ndarray
    method: str
    target: int

    @property
    def shape(self):
        return self.values.shape

    def normalized(self):
        """Min-max rescaled view in [0, 1]; constant maps become zeros."""
        lo, hi = self.values.min(), self.values.max()
        if hi == lo:
            return np.zeros_like(self.values)
        return (self.values - lo) / (hi - lo)


@dataclass(frozen=True)
class RiseMaskConfig:
    """Coarse binary grids upsampled bilinearly with a random crop offset."""

    cells: int = 7
    keep_prob: float = 0.5


def bilinear_resize(grids, out_h, out_w):
    """Bilinear upsampling of a (N, h, w) stack to (N, out_h, out_w)."""
    n, h, w = grids.shape
    rows = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    cols = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    r0 = np.clip(np.floor(rows).astype(int), 0, h - 1)
    c0 = np.clip(np.floor(cols).astype(int), 0, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = np.clip(rows - r0, 0.0, 1.0)[None, :, None]
    fc = np.clip(cols - c0, 0.0, 1.0)[None, None, :]
    top = grids[:, r0][:, :, c0] * (1 - fc) + grids[:, r0][:, :, c1] * fc
    bot = grids[:, r1][:, :, c0] * (1 - fc) + grids[:, r1][:, :, c1] * fc
    return top * (1 - fr) + bot * fr


def generate_rise_masks(shape, num_masks, cfg=None, seed=0):
    """Random smooth masks in [0, 1], shaped (num_masks, H, W)."""
    cfg = cfg or RiseMaskConfig()
    h, w = shape
    rng = np.random.default_rng(seed)
    grid = (rng.random((num_masks, cfg.cells, cfg.cells)) < cfg.keep_prob).astype(np.float64)
    cell_h = -(-h // cfg.cells)
    cell_w = -(-w // cfg.cells)
    big = bilinear_resize(grid, (cfg.cells + 1) * cell_h, (cfg.cells + 1) * cell_w)
    masks = np.empty((num_masks, h, w))
    offs_r = rng.integers(0, cell_h, num_masks)
    offs_c = rng.integers(0, cell_w, num_masks)
    for i in range(num_masks):
        masks[i] = big[i, offs_r[i]:offs_r[i] + h, offs_c[i]:offs_c[i] + w]
    return masks


def rise_aggregate(x, masks, scores):
    """Score-weighted sum of masked inputs over the score sum, channel-meaned.

    Operation order follows the formula literally (weighted sum, divide by
    the score sum, then reduce channels) so direct re-evaluations match
    bit-exactly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    denom = scores.sum()
    if denom <= 0:
        raise DegenerateInputError(f"scores sum to {denom}; cannot normalize")
    weighted = (masks[..., None] * x[None]) * scores[:, None, None, None]
    return (weighted.sum(axis=0) / denom).mean(axis=2)


def rise_explain(x, handle, target, num_masks=1000, cfg=None, seed=0, masks=None):
    """RISE saliency for one input; pass explicit masks to skip generation."""
    x = np.asarray(x, dtype=np.float64)
    if masks is None:
        if num_masks < 1:
            raise DegenerateInputError("num_masks must be >= 1")
        masks = generate_rise_masks(x.shape[:2], num_masks, cfg, seed)
    scores = handle.query_batch(masks[..., None] * x[None])[:, target]
    values = rise_aggregate(x, masks, scores)
    return SaliencyMap(values=values, method="rise", target=target)


def lime_explain(x, seg, handle, target, n_samples=512, mask_prob=0.5,
                 ridge=1e-3, kernel_width=0.25, seed=0, fill="zero"):
    """Local weighted ridge fit on segment-mask indicators.

    Design matrix rows are the binary mask vectors (1 = segment off); sample
    weights are exp(-d^2 / width^2) with d the cosine distance between each
    row's kept-segment indicator and the all-kept row (an all-off row gets
    the maximal distance 1). The intercept is unpenalized. Returns
    (per-segment weights, SaliencyMap) where weights are the negated
    regression coefficients, so positive means salient.
    """
    x = np.asarray(x, dtype=np.float64)
    s = seg.n_segments
    if s < 2:
        raise SingularDesignError("need at least 2 segments")
    rng = np.random.default_rng(seed)
    z = np.zeros((n_samples, s), dtype=np.float64)
    z[1:] = rng.random((n_samples - 1, s)) < mask_prob

    fills = fill_values(x, seg, fill)
    inputs = np.stack([apply_segment_mask(x, seg, row, fills=fills) for row in z])
    y = handle.query_batch(inputs)[:, target]

    kept = 1.0 - z
    norms = np.sqrt((kept ** 2).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        cosine = np.where(norms > 0, kept.sum(axis=1) / (norms * np.sqrt(s)), 0.0)
    dist = 1.0 - cosine
    weights = np.exp(-(dist ** 2) / kernel_width ** 2)

    design = np.hstack([np.ones((n_samples, 1)), z])
    penalty = np.diag([0.0] + [ridge] * s)
    gram = design.T @ (design * weights[:, None]) + penalty
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularDesignError(
            f"normal matrix condition estimate {cond:.3g}; increase ridge")
    beta = np.linalg.solve(gram, design.T @ (weights * y))
    seg_weights = -beta[1:]

    values = seg_weights[seg.labels - 1]
    return seg_weights, SaliencyMap(values=values, method="lime", target=target)


def occlusion_explain(x, handle, target, window=4, stride=2, fill=0.0):
    """Mean score drop over every occluding window that covers each pixel.

    Window placements step by ``stride`` and always include a final
    flush-to-edge placement, so windows cover the whole grid whenever
    stride <= window. Pixels no window covers keep saliency 0.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[:2]
    if window > min(h, w):
        raise ValueError(f"window {window} exceeds input size {(h, w)}")
    base = handle.query(x)[target]

    def placements(extent):
        pos = list(range(0, extent - window + 1, stride))
        if pos[-1] != extent - window:
            pos.append(extent - window)
        return pos

    spots = [(r, c) for r in placements(h) for c in placements(w)]
    occluded = np.repeat(x[None], len(spots), axis=0)
    for i, (r, c) in enumerate(spots):
        occluded[i, r:r + window, c:c + window, :] = fill
    scores = handle.query_batch(occluded)[:, target]

    acc = np.zeros((h, w))
    cnt = np.zeros((h, w))
    for (r, c), score in zip(spots, scores):
        acc[r:r + window, c:c + window] += base - score
        cnt[r:r + window, c:c + window] += 1
    values = np.divide(acc, cnt, out=np.zeros_like(acc), where=cnt > 0)
    return SaliencyMap(values=values, method="occlusion", target=target)
