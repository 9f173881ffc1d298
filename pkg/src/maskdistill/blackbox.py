"""The query-only classifier boundary.

Every classifier is wrapped in a :class:`ClassifierHandle` that exposes
nothing but input shape, class count and probability queries; downstream
code receives only the handle, so gradient leakage is impossible by
construction. Built-in handles are analytic oracles (whose optimal
explanation is known exactly) and a tiny trainable classifier for
end-to-end runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .synth import make_shape_dataset

SIMPLEX_TOL = 1e-9


class QueryError(ValueError):
    """Bad query input or an output violating the probability contract."""


class TrainingError(RuntimeError):
    """Toy classifier training failed to reach its accuracy floor."""


@dataclass(frozen=True)
class ClassifierHandle:
    """Immutable query-access wrapper around a classifier.

    ``fn`` maps a batch (N, H, W, C) to probabilities (N, n_classes); it must
    be pure. metadata is free-form (oracle parameters, training record).
    """

    n_classes: int
    input_shape: tuple
    fn: Callable[[np.ndarray], np.ndarray]
    name: str = "blackbox"
    metadata: dict = field(default_factory=dict)

    def query(self, x):
        """Probability vector for a single (H, W, C) input."""
        return self.query_batch(np.asarray(x)[None])[0]

    def query_batch(self, xs):
        """Probability vectors for a batch or list of inputs, order preserved.

        Each sample is evaluated on its own so a stored score can always be
        reproduced bit-exactly by a later single query (batched float
        reductions would otherwise differ in the last ulps).
        """
        if isinstance(xs, np.ndarray) and xs.ndim == len(self.input_shape):
            xs = xs[None]
        xs = [np.asarray(x, dtype=np.float64) for x in xs]
        for i, x in enumerate(xs):
            if x.shape != self.input_shape:
                raise QueryError(
                    f"input {i}: shape {x.shape} does not match declared "
                    f"shape {self.input_shape}")
        probs = np.concatenate([np.asarray(self.fn(x[None]), dtype=np.float64)
                                for x in xs], axis=0)
        _check_simplex(probs, self.n_classes)
        return probs


def _check_simplex(probs, n_classes):
    if probs.ndim != 2 or probs.shape[1] != n_classes:
        raise QueryError(f"classifier returned shape {probs.shape}, wanted (N, {n_classes})")
    if not np.isfinite(probs).all():
        raise QueryError("classifier returned non-finite probabilities")
    if (probs < -SIMPLEX_TOL).any() or (probs > 1 + SIMPLEX_TOL).any():
        raise QueryError("classifier probabilities outside [0, 1]")
    sums = probs.sum(axis=1)
    if np.abs(sums - 1.0).max() > SIMPLEX_TOL:
        raise QueryError(f"classifier probabilities sum to {sums} != 1")


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def constant_oracle(probs, input_shape):
    """Returns the same probability vector for every input."""
    probs = np.asarray(probs, dtype=np.float64)
    fixed = probs.copy()

    def fn(xs):
        return np.tile(fixed, (len(xs), 1))

    return ClassifierHandle(n_classes=probs.size, input_shape=tuple(input_shape),
                            fn=fn, name="constant-oracle",
                            metadata={"kind": "constant", "probs": probs.tolist()})


def region_mean_oracle(region, input_shape, temperature=1.0):
    """Two-class oracle: class-0 logit is the mean intensity over ``region``,
    class-1 logit its complement (1 - mean), softened by ``temperature``.

    Depends only on pixels inside the region, so the optimal explanation for
    class 0 is exactly the region mask.
    """
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise QueryError("region-mean oracle needs a nonempty region")
    if region.shape != tuple(input_shape[:2]):
        raise QueryError(f"region shape {region.shape} does not match input {input_shape}")

    def fn(xs):
        means = xs[:, region, :].mean(axis=(1, 2))
        logits = np.stack([means, 1.0 - means], axis=1) / temperature
        return softmax(logits)

    return ClassifierHandle(n_classes=2, input_shape=tuple(input_shape), fn=fn,
                            name="region-mean-oracle",
                            metadata={"kind": "region-mean", "temperature": temperature})


def planted_shape_oracle(regions, input_shape, temperature=1.0):
    """Multi-class oracle: one disjoint region per class, class-c logit is the
    mean intensity over region c. Ground truth for class c is region c."""
    regions = [np.asarray(r, dtype=bool) for r in regions]
    if len(regions) < 2:
        raise QueryError("planted-shape oracle needs at least two regions")
    for i, r in enumerate(regions):
        if not r.any():
            raise QueryError(f"planted-shape oracle region {i} is empty")
        for j in range(i):
            if (r & regions[j]).any():
                raise QueryError(f"planted-shape oracle regions {j} and {i} overlap")

    def fn(xs):
        logits = np.stack([xs[:, r, :].mean(axis=(1, 2)) for r in regions], axis=1)
        return softmax(logits / temperature)

    return ClassifierHandle(n_classes=len(regions), input_shape=tuple(input_shape),
                            fn=fn, name="planted-shape-oracle",
                            metadata={"kind": "planted-shape", "temperature": temperature})


def _net_handle(net, name, metadata):
    def fn(xs):
        p = nn.sigmoid(net.forward(xs)).reshape(len(xs))
        return np.stack([p, 1.0 - p], axis=1)

    return ClassifierHandle(n_classes=2, input_shape=net.input_shape, fn=fn,
                            name=name, metadata=metadata)


def default_classifier_layers(in_channels=1):
    return [
        nn.LayerSpec.conv2d(3, in_channels, 4, stride=2, padding=1),
        nn.LayerSpec.sigmoid(),
        nn.LayerSpec.conv2d(3, 4, 8, stride=2, padding=1),
        nn.LayerSpec.sigmoid(),
        nn.LayerSpec.fully_connected(16),
        nn.LayerSpec.sigmoid(),
        nn.LayerSpec.fully_connected(1),
    ]


def train_toy_classifier(n_samples=500, size=16, noise=0.25, epochs=30, seed=0,
                         accuracy_floor=0.9, batch_size=32, lr=0.02):
    """Train a small squares-vs-discs classifier; returns a frozen handle.

    The final sigmoid is applied inside the handle so the checkpointed net
    ends at logits. Training minimizes binary cross-entropy with Adam. If the
    holdout accuracy lands below ``accuracy_floor``, raises TrainingError
    carrying the per-epoch loss curve.
    """
    images, labels = make_shape_dataset(n_samples, size=size, noise=noise, seed=seed)
    n_holdout = max(1, int(round(0.2 * n_samples)))
    x_train, y_train = images[n_holdout:], labels[n_holdout:]
    x_hold, y_hold = images[:n_holdout], labels[:n_holdout]

    net = nn.build_network(default_classifier_layers(images.shape[3]),
                           images.shape[1:], seed=seed, role="toy-classifier")
    opt = nn.Adam(lr=lr)
    rng = np.random.default_rng(seed + 1)
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(x_train))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            xb, yb = x_train[idx], y_train[idx]
            logits = net.forward(xb).reshape(-1)
            p = nn.sigmoid(logits)
            # class 0 = square: target probability of the sigmoid head is 1-y
            t = 1.0 - yb
            eps = 1e-12
            losses.append(float(-np.mean(t * np.log(p + eps) + (1 - t) * np.log(1 - p + eps))))
            # d BCE / d logits = (p - t), straight through the sigmoid head
            net.backward(((p - t) / len(idx)).reshape(-1, 1))
            opt.step(net)
        curve.append(float(np.mean(losses)))

    def accuracy(xs, ys):
        if len(xs) == 0:
            return float("nan")
        p = nn.sigmoid(net.forward(xs).reshape(-1))
        return float(np.mean((p < 0.5).astype(int) == ys))

    record = {
        "kind": "toy-classifier",
        "task": "squares-vs-discs",
        "n_samples": n_samples,
        "epochs": epochs,
        "seed": seed,
        "train_accuracy": accuracy(x_train, y_train),
        "holdout_accuracy": accuracy(x_hold, y_hold),
        "loss_curve": curve,
    }
    if epochs > 0 and record["holdout_accuracy"] < accuracy_floor:
        raise TrainingError(
            f"holdout accuracy {record['holdout_accuracy']:.3f} below floor "
            f"{accuracy_floor}; loss curve: {curve}")
    handle = _net_handle(net, "toy-classifier", record)
    return handle, net


def save_classifier(net, path, record=None):
    nn.save_network(net, path, extra={"classifier": record or {}})


def load_classifier(path):
    net, extra = nn.load_network(path)
    record = extra.get("classifier", {})
    return _net_handle(net, "toy-classifier", record)
