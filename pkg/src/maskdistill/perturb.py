"""Neighbourhood sample generation around a local input.

A perturbation batch is built by masking off random subsets of the input's
segments (a mask vector entry of 1 means that segment is replaced by the
fill value), labeling every sample through the black-box, and attaching a
closeness weight per sample: raw weight 1 / max(L2 distance to the input,
1e-6), rescaled so the batch mean is exactly 1. The unperturbed input is
always included once, pinned to the train split, so the optimization stays
anchored at the point being explained.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DISTANCE_FLOOR = 1e-6
FILL_POLICIES = ("zero", "segment-mean", "global-mean")

CACHE_ENV_VAR = "MASKDISTILL_CACHE_DIR"


class SamplerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    n_samples: int = 512
    mask_prob: float = 0.5
    fill: str = "zero"
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2:
            raise SamplerConfigError(f"n_samples must be >= 2, got {self.n_samples}")
        if not 0.0 < self.mask_prob < 1.0:
            raise SamplerConfigError(f"mask_prob must be in (0, 1), got {self.mask_prob}")
        if self.fill not in FILL_POLICIES:
            raise SamplerConfigError(f"fill must be one of {FILL_POLICIES}, got {self.fill!r}")
        if not 0.0 < self.val_fraction <= 0.5:
            raise SamplerConfigError(
                f"val_fraction must be in (0, 0.5], got {self.val_fraction}")

    def to_dict(self):
        return {"n_samples": self.n_samples, "mask_prob": self.mask_prob,
                "fill": self.fill, "val_fraction": self.val_fraction,
                "seed": self.seed}


@dataclass
class PerturbationBatch:
    """Q perturbed inputs with their segment masks, target scores, closeness
    weights and train/val assignment. Index 0 is the unperturbed input."""

    masks: np.ndarray     # (Q, S) uint8, 1 = segment masked off
    inputs: np.ndarray    # (Q, H, W, C)
    scores: np.ndarray    # (Q,) black-box score of the target class
    gammas: np.ndarray    # (Q,) closeness weights, mean exactly 1
    is_val: np.ndarray    # (Q,) bool
    target: int
    fill: str = "zero"

    @property
    def n_samples(self):
        return len(self.masks)

    @property
    def train_indices(self):
        return np.nonzero(~self.is_val)[0]

    @property
    def val_indices(self):
        return np.nonzero(self.is_val)[0]


def fill_values(x, seg, policy):
    """Per-pixel replacement values for masked-off segments, (H, W, C)."""
    if policy == "zero":
        return np.zeros_like(x)
    if policy == "global-mean":
        return np.broadcast_to(x.mean(axis=(0, 1)), x.shape).copy()
    if policy == "segment-mean":
        out = np.empty_like(x)
        for label in range(1, seg.n_segments + 1):
            member = seg.labels == label
            out[member] = x[member].mean(axis=0)
        return out
    raise SamplerConfigError(f"unknown fill policy {policy!r}")


def apply_segment_mask(x, seg, mask_vec, fill="zero", fills=None):
    """Replace the segments flagged in mask_vec with the fill value."""
    if fills is None:
        fills = fill_values(x, seg, fill)
    off = np.asarray(mask_vec, dtype=bool)[seg.labels - 1]
    return np.where(off[..., None], fills, x)


def gamma_weights(x, inputs, floor=DISTANCE_FLOOR):
    """Closeness weights: 1 / max(||x - x_i||_2, floor), rescaled to mean 1."""
    diffs = (inputs - x[None]).reshape(len(inputs), -1)
    dists = np.sqrt((diffs ** 2).sum(axis=1))
    raw = 1.0 / np.maximum(dists, floor)
    return raw / raw.mean()


def split_indices(n, fraction, seed, pinned=()):
    """Deterministic disjoint-exhaustive train/val assignment.

    Returns a boolean is_val array; indices in ``pinned`` never land in val.
    """
    rng = np.random.default_rng(seed)
    n_val = int(round(n * fraction))
    eligible = np.setdiff1d(np.arange(n), np.asarray(pinned, dtype=int))
    n_val = min(n_val, len(eligible))
    val = rng.choice(eligible, size=n_val, replace=False)
    is_val = np.zeros(n, dtype=bool)
    is_val[val] = True
    return is_val


def split(batch, fraction, seed):
    """Fresh train/val index views over a batch: disjoint, exhaustive,
    deterministic under the seed. Does not mutate the stored assignment."""
    is_val = split_indices(batch.n_samples, fraction, seed)
    return np.nonzero(~is_val)[0], np.nonzero(is_val)[0]


def sample(x, seg, handle, target, cfg=None, cache_dir=None):
    """Draw a labeled perturbation batch around x.

    Segments are masked off independently with probability cfg.mask_prob;
    sample 0 is always the unperturbed input (train split). Scores come from
    one black-box batch query. With a cache directory (argument or the
    MASKDISTILL_CACHE_DIR environment variable), repeated identical runs
    load the stored batch instead of re-querying.
    """
    cfg = cfg or SamplerConfig()
    x = np.asarray(x, dtype=np.float64)
    if target >= handle.n_classes:
        raise SamplerConfigError(
            f"target class {target} out of range for {handle.n_classes} classes")
    if seg.n_segments < 2:
        raise SamplerConfigError("need at least 2 segments to perturb")

    cache_dir = cache_dir or os.environ.get(CACHE_ENV_VAR)
    key = None
    if cache_dir:
        key = _cache_key(x, seg, target, cfg)
        cached = _cache_load(cache_dir, key, target, cfg)
        if cached is not None:
            return cached

    rng = np.random.default_rng(cfg.seed)
    q, s = cfg.n_samples, seg.n_segments
    masks = np.zeros((q, s), dtype=np.uint8)
    masks[1:] = rng.random((q - 1, s)) < cfg.mask_prob

    fills = fill_values(x, seg, cfg.fill)
    inputs = np.empty((q,) + x.shape)
    for i in range(q):
        inputs[i] = apply_segment_mask(x, seg, masks[i], fills=fills)

    scores = handle.query_batch(inputs)[:, target]
    gammas = gamma_weights(x, inputs)
    is_val = split_indices(q, cfg.val_fraction, cfg.seed + 1, pinned=(0,))
    batch = PerturbationBatch(masks=masks, inputs=inputs, scores=scores,
                              gammas=gammas, is_val=is_val, target=target,
                              fill=cfg.fill)
    if cache_dir:
        _cache_store(cache_dir, key, batch)
    return batch


def _cache_key(x, seg, target, cfg):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(x, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(seg.labels, dtype="<i8").tobytes())
    h.update(json.dumps({"target": int(target), **cfg.to_dict()}, sort_keys=True).encode())
    return h.hexdigest()


def _cache_load(cache_dir, key, target, cfg):
    path = Path(cache_dir) / f"batch-{key}.npz"
    if not path.exists():
        return None
    data = np.load(path)
    return PerturbationBatch(masks=data["masks"], inputs=data["inputs"],
                             scores=data["scores"], gammas=data["gammas"],
                             is_val=data["is_val"], target=int(target),
                             fill=cfg.fill)


def _cache_store(cache_dir, key, batch):
    path = Path(cache_dir)
    path.mkdir(parents=True, exist_ok=True)
    np.savez(path / f"batch-{key}.npz", masks=batch.masks, inputs=batch.inputs,
             scores=batch.scores, gammas=batch.gammas, is_val=batch.is_val)
