"""Joint mask-generation / student-distillation training.

Two small networks learn together on a perturbation batch: the mask net maps
an input to a single [0,1] mask plane (broadcast over channels), and the
student predicts the black-box's target-class score from the mask-multiplied
input. Their shared objective is a closeness-weighted MSE against the
black-box scores, regularized per variant:

* ``v1``: + lambda_l1 * mean(|mask|) + lambda_kl * KL between batch-level
  histograms of black-box and student scores. The histograms are hard
  counts, so the KL term is piecewise constant in the parameters and its
  gradient is zero almost everywhere; it contributes to the tracked loss
  and to model selection, not to the descent direction.
* ``v2``: - lambda_cnt * MSE of the student under the complemented mask,
  the whole total clamped at zero. Driving the complement-mask error up
  makes the kept region necessary, which suppresses the all-ones mask that
  plain MSE drifts toward. The clamp both bounds the total below and stops
  the counterfactual pressure once it dominates; without it the mask
  collapses to empty (the student then fits the anchor with its bias and
  pushes everything else away).

After training the student is discarded; the explanation is the mask net's
output on the unperturbed input, its product with the input, and a binarized
mask thresholded at mean + stddev.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn

HISTOGRAM_EPS = 1e-8


class DaxConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def default_mask_layers(in_channels=1):
    return [
        nn.LayerSpec.conv2d(3, in_channels, 8, stride=1, padding=1),
        nn.LayerSpec.conv2d(3, 8, 1, stride=1, padding=1),
        nn.LayerSpec.sigmoid(),
    ]


def default_student_layers(in_channels=1):
    return [
        nn.LayerSpec.conv2d(3, in_channels, 8, stride=2, padding=1),
        nn.LayerSpec.conv2d(3, 8, 16, stride=2, padding=1),
        nn.LayerSpec.fully_connected(32),
        nn.LayerSpec.fully_connected(1),
        nn.LayerSpec.sigmoid(),
    ]


@dataclass(frozen=True)
class DaxConfig:
    variant: str = "v2"
    lambda_l1: float = 0.001
    lambda_kl: float = 0.02
    lambda_cnt: float = 0.5
    epochs: int = 30
    batch_size: int = 64
    kl_bins: int = 10
    learning_rate: float = 0.01
    optimizer: str = "adam"
    patience: int | None = None
    select: str = "best-val"
    mask_layers: tuple | None = None
    student_layers: tuple | None = None

    def __post_init__(self):
        if self.variant not in ("v1", "v2"):
            raise DaxConfigError(f"variant must be 'v1' or 'v2', got {self.variant!r}")
        if min(self.lambda_l1, self.lambda_kl, self.lambda_cnt) < 0:
            raise DaxConfigError("loss weights must be >= 0")
        if self.kl_bins < 2:
            raise DaxConfigError(f"kl_bins must be >= 2, got {self.kl_bins}")
        if self.epochs < 1:
            raise DaxConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.select not in ("best-val", "final"):
            raise DaxConfigError(f"select must be 'best-val' or 'final', got {self.select!r}")

    def to_dict(self):
        d = {"variant": self.variant, "epochs": self.epochs,
             "batch_size": self.batch_size, "kl_bins": self.kl_bins,
             "learning_rate": self.learning_rate, "optimizer": self.optimizer,
             "patience": self.patience, "select": self.select}
        if self.variant == "v1":
            d.update(lambda_l1=self.lambda_l1, lambda_kl=self.lambda_kl)
        else:
            d.update(lambda_cnt=self.lambda_cnt)
        return d


@dataclass
class Explanation:
    """A continuous mask in [0,1], its product with the input, and the
    binarized mask (strictly above mean + stddev of the mask values)."""

    mask: np.ndarray          # (H, W)
    product: np.ndarray       # (H, W, C)
    binary: np.ndarray        # (H, W) bool
    target: int
    mu: float
    sigma: float
    method: str = "dax"
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss)


def mask_forward(mask_net, x):
    """One mask plane per input regardless of channel count.

    Accepts (H, W, C) or a (N, H, W, C) batch; returns (H, W) or (N, H, W).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    batch = x[None] if single else x
    out = mask_net.forward(batch)
    if out.ndim != 4 or out.shape[3] != 1:
        raise DaxConfigError(
            f"mask net must end in one channel plane, got output shape {out.shape}")
    masks = out[..., 0]
    return masks[0] if single else masks


def masked_input(x, masks):
    """Broadcast (N, H, W) masks over the channels of (N, H, W, C) inputs."""
    return x * masks[..., None]


def student_forward(student_net, xm):
    """Scalar score in (0,1) per sample of a masked-input batch."""
    xm = np.asarray(xm, dtype=np.float64)
    single = xm.ndim == 3
    batch = xm[None] if single else xm
    out = student_net.forward(batch)
    scores = out.reshape(len(batch))
    return float(scores[0]) if single else scores


def loss_mse(scores, preds, gammas):
    """Closeness-weighted distillation error: mean of gamma * (y - yhat)^2."""
    return float(np.mean(gammas * (scores - preds) ** 2))


def loss_sparsity(masks):
    """Per-pixel mean of |mask| over the batch (masks live in (0,1))."""
    return float(np.mean(np.abs(masks)))


def loss_kl(target_scores, student_scores, bins=10, eps=HISTOGRAM_EPS):
    """KL(hist(targets) || hist(predictions)) over `bins` buckets of [0, 1].

    Both histograms get add-eps smoothing before normalization, so the value
    is finite for any pair of score lists.
    """
    p, _ = np.histogram(np.asarray(target_scores, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    q, _ = np.histogram(np.asarray(student_scores, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    p = p + eps
    q = q + eps
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(p * np.log(p / q)))


def loss_counterfactual(scores, complement_preds):
    """Agreement under the complemented mask: mean of (y - yhat_c)^2."""
    return float(np.mean((scores - complement_preds) ** 2))


def total_loss(cfg, scores, preds, gammas, masks, complement_preds=None):
    """Variant total. v2 returns max(mse - lambda_cnt * cnt, 0)."""
    mse = loss_mse(scores, preds, gammas)
    if cfg.variant == "v1":
        return (mse + cfg.lambda_l1 * loss_sparsity(masks)
                + cfg.lambda_kl * loss_kl(scores, preds, cfg.kl_bins))
    cnt = loss_counterfactual(scores, complement_preds)
    return max(mse - cfg.lambda_cnt * cnt, 0.0)


def build_nets(input_shape, cfg, seed):
    in_channels = input_shape[2]
    mask_specs = list(cfg.mask_layers or default_mask_layers(in_channels))
    student_specs = list(cfg.student_layers or default_student_layers(in_channels))
    rng = np.random.default_rng(seed)
    mask_net = nn.build_network(mask_specs, input_shape,
                                seed=int(rng.integers(2 ** 31)), role="mask-net")
    student_net = nn.build_network(student_specs, input_shape,
                                   seed=int(rng.integers(2 ** 31)), role="student-net")
    return mask_net, student_net


def _batch_losses_and_grads(cfg, mask_net, student_net, xb, yb, gb, backward=True):
    """One joint forward (and optionally backward) over a minibatch.

    Gradient assembly: the student backward for each loss term yields the
    gradient at its masked input; multiplying by the input (and summing over
    channels) converts that to a mask gradient, and a single mask-net
    backward propagates the combined mask gradient. Parameter gradients
    accumulate across terms, which is exactly the sum rule.
    """
    b = len(xb)
    masks = mask_forward(mask_net, xb)
    xm = masked_input(xb, masks)
    preds = student_forward(student_net, xm)
    residual = preds - yb
    mse = float(np.mean(gb * residual ** 2))

    if cfg.variant == "v1":
        total = (mse + cfg.lambda_l1 * loss_sparsity(masks)
                 + cfg.lambda_kl * loss_kl(yb, preds, cfg.kl_bins))
        if not backward:
            return total
        dpred = (2.0 * gb * residual / b).reshape(-1, 1)
        g_xm = student_net.backward(dpred)
        dmask = (g_xm * xb).sum(axis=3) + cfg.lambda_l1 / masks.size
        mask_net.backward(dmask[..., None])
        return total

    xc = masked_input(xb, 1.0 - masks)
    # run the MSE backward before the complement forward overwrites caches
    g_xm = None
    if backward:
        dpred = (2.0 * gb * residual / b).reshape(-1, 1)
        g_xm = student_net.backward(dpred)
    cpreds = student_forward(student_net, xc)
    cnt = float(np.mean((yb - cpreds) ** 2))
    total = mse - cfg.lambda_cnt * cnt
    if total <= 0.0:
        # clamped: constant at zero, so no gradient flows for this batch
        if backward:
            mask_net.zero_grad()
            student_net.zero_grad()
        return 0.0
    if not backward:
        return total
    dcpred = (-cfg.lambda_cnt * 2.0 * (cpreds - yb) / b).reshape(-1, 1)
    g_xc = student_net.backward(dcpred)
    dmask = ((g_xm - g_xc) * xb).sum(axis=3)
    mask_net.backward(dmask[..., None])
    return total


def evaluate_total(cfg, mask_net, student_net, x_view, y_view, g_view):
    """Variant total loss on a data view, no gradients."""
    if len(x_view) == 0:
        return float("nan")
    return _batch_losses_and_grads(cfg, mask_net, student_net,
                                   x_view, y_view, g_view, backward=False)


def train(x, target, batch, cfg=None, seed=0, return_nets=False):
    """Optimize mask and student nets jointly on a labeled batch.

    Runs cfg.epochs of shuffled minibatches over the train split, logging
    train/val totals per epoch, then builds the explanation from the epoch
    with the lowest validation total (or the final epoch, per cfg.select).
    The student net never leaves this function unless return_nets is set.
    """
    cfg = cfg or DaxConfig()
    x = np.asarray(x, dtype=np.float64)
    mask_net, student_net = build_nets(x.shape, cfg, seed)
    if cfg.optimizer == "adam":
        opt = nn.Adam(lr=cfg.learning_rate)
    elif cfg.optimizer == "sgd":
        opt = nn.Sgd(lr=cfg.learning_rate)
    else:
        raise DaxConfigError(f"unknown optimizer {cfg.optimizer!r}")

    tr = batch.train_indices
    va = batch.val_indices
    xs, ys, gs = batch.inputs, batch.scores, batch.gammas
    rng = np.random.default_rng(seed + 1)

    history = []
    best_val = np.inf
    best_weights = mask_net.get_weights()
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = tr[rng.permutation(len(tr))]
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            total = _batch_losses_and_grads(cfg, mask_net, student_net,
                                            xs[idx], ys[idx], gs[idx])
            if not np.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}")
            opt.step([mask_net, student_net])
        train_total = evaluate_total(cfg, mask_net, student_net, xs[tr], ys[tr], gs[tr])
        val_total = evaluate_total(cfg, mask_net, student_net, xs[va], ys[va], gs[va])
        history.append((epoch, train_total, val_total))
        if np.isfinite(val_total) and val_total < best_val:
            best_val = val_total
            best_weights = mask_net.get_weights()
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale > cfg.patience:
                break

    if cfg.select == "best-val" and len(va) > 0:
        mask_net.set_weights(best_weights)
    explanation = extract(x, mask_net, target, history=history,
                          method=f"dax-{cfg.variant}")
    if return_nets:
        return explanation, mask_net, student_net
    return explanation


def joint_gradient_check(cfg, mask_net, student_net, xb, yb, gb, epsilon=1e-5):
    """Finite-difference check of the variant total loss through the full
    composition student(input * mask(input)).

    Returns the max relative error over every parameter of both nets, with
    the same error convention as nn.finite_diff_check. For v1 the histogram
    KL term is piecewise constant, so both the analytic and the numeric
    gradient see zero contribution from it away from bin boundaries.
    """
    mask_net.zero_grad()
    student_net.zero_grad()
    _batch_losses_and_grads(cfg, mask_net, student_net, xb, yb, gb)
    analytic = [p.grad.copy() for net in (mask_net, student_net) for p in net.params()]
    params = [p for net in (mask_net, student_net) for p in net.params()]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.ravel()
        aflat = a.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            hi = _batch_losses_and_grads(cfg, mask_net, student_net, xb, yb, gb,
                                         backward=False)
            flat[j] = orig - epsilon
            lo = _batch_losses_and_grads(cfg, mask_net, student_net, xb, yb, gb,
                                         backward=False)
            flat[j] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            denom = max(abs(aflat[j]), abs(numeric), 1e-3)
            worst = max(worst, abs(aflat[j] - numeric) / denom)
    mask_net.zero_grad()
    student_net.zero_grad()
    return worst


def extract(x, mask_net, target, history=None, method="dax"):
    """Build the Explanation for an input from a trained mask net."""
    x = np.asarray(x, dtype=np.float64)
    mask = mask_forward(mask_net, x)
    mu = float(mask.mean())
    sigma = float(mask.std())
    return Explanation(mask=mask, product=x * mask[..., None],
                       binary=mask > mu + sigma, target=target,
                       mu=mu, sigma=sigma, method=method,
                       history=list(history or []))
