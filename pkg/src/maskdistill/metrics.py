"""Quantitative evaluation of explanations.

Binarization thresholds a continuous mask strictly above its mean + stddev;
IoU compares binary masks against ground truth; the deletion curve removes
pixels in descending saliency order and tracks the black-box score (lower
area under that curve means the saliency found what the model uses); the
sensitivity protocol re-runs an explainer with a wrong target class and
expects the IoU against the true region to drop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class IouUndefinedError(ValueError):
    """Both masks are empty; the caller decides the policy."""


class EmptySuiteError(ValueError):
    pass


def binarize(mask):
    """Boolean mask, true exactly where mask > mean + stddev (strict).

    A constant mask has stddev 0 and nothing strictly above its mean, so it
    binarizes to all false.
    """
    mask = np.asarray(mask, dtype=np.float64)
    return mask > mask.mean() + mask.std()


def iou(a, b):
    """Intersection over union of two same-shape boolean masks."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        raise IouUndefinedError("both masks are empty")
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class DeletionCurve:
    """Target scores at increasing removal fractions, plus the trapezoidal
    area. fractions[0] is 0 and scores[0] the unmasked black-box score."""

    fractions: np.ndarray
    scores: np.ndarray
    auc: float

    def rows(self):
        return list(zip(self.fractions.tolist(), self.scores.tolist()))


def deletion_ranking(saliency):
    """Flat pixel order by descending saliency; ties fall back to index order."""
    flat = np.asarray(saliency, dtype=np.float64).ravel()
    return np.argsort(-flat, kind="stable")


def deletion_auc(saliency, x, handle, target, steps=11, fill=0.0):
    """Progressively replace the top-saliency fraction of pixels with fill.

    Queries the black-box once per fraction (steps evenly spaced fractions,
    0 through 1) and integrates score over fraction with the trapezoid rule.
    Only the ranks of the saliency values matter.
    """
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    x = np.asarray(x, dtype=np.float64)
    values = saliency.values if hasattr(saliency, "values") else saliency
    order = deletion_ranking(values)
    n_pixels = order.size
    fractions = np.linspace(0.0, 1.0, steps)

    batch = np.repeat(x[None], steps, axis=0)
    flat = batch.reshape(steps, n_pixels, -1)
    for i, frac in enumerate(fractions):
        k = int(round(frac * n_pixels))
        flat[i, order[:k], :] = fill
    scores = handle.query_batch(batch)[:, target]
    auc = float(np.trapezoid(scores, fractions))
    return DeletionCurve(fractions=fractions, scores=scores, auc=auc)


def sensitivity_eval(explain_fn, x, target, wrong_target, gt_region):
    """IoU of binarized explanations for the correct and a wrong target.

    ``explain_fn(x, target)`` must return a continuous (H, W) mask. Returns
    (iou_correct, iou_wrong), both against gt_region; empty binarized masks
    score 0 against a nonempty region.
    """
    if target == wrong_target:
        raise ValueError("wrong_target must differ from target")
    gt = np.asarray(gt_region, dtype=bool)
    out = []
    for t in (target, wrong_target):
        mask = np.asarray(explain_fn(x, t), dtype=np.float64)
        out.append(iou(binarize(mask), gt))
    return tuple(out)


def aggregate(rows):
    """Population mean/std per (method, metric) over result rows.

    rows are dicts with "method", "metric" and "value" keys; returns a list
    of {"method", "metric", "mean", "std", "n"} sorted by method then metric.
    """
    if not rows:
        raise EmptySuiteError("no results to aggregate")
    groups = {}
    for row in rows:
        groups.setdefault((row["method"], row["metric"]), []).append(float(row["value"]))
    out = []
    for (method, metric) in sorted(groups):
        values = np.asarray(groups[(method, metric)])
        out.append({"method": method, "metric": metric,
                    "mean": float(values.mean()), "std": float(values.std()),
                    "n": int(values.size)})
    return out


def render_table(aggregates):
    """Fixed-width text table of aggregate rows."""
    header = f"{'method':<12} {'metric':<16} {'mean':>10} {'std':>10} {'n':>4}"
    lines = [header, "-" * len(header)]
    for row in aggregates:
        lines.append(f"{row['method']:<12} {row['metric']:<16} "
                     f"{row['mean']:>10.4f} {row['std']:>10.4f} {row['n']:>4}")
    return "\n".join(lines) + "\n"
