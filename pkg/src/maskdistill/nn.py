"""Tiny dense-network engine with hand-written reverse-mode gradients.

Three layer kinds (conv2d, fully-connected, sigmoid), two first-order
optimizers (SGD, Adam), a finite-difference gradient checker, and a JSON
checkpoint container. Everything is float64 on numpy arrays; batches use an
explicit leading dimension (conv inputs are ``(N, H, W, C)``, fully-connected
inputs are flattened to ``(N, features)``). Networks here are 2-4 layers by
design, so there is no graph machinery: just ordered layers with cached
activations and explicit backward passes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "maskdistill-net"
CHECKPOINT_VERSION = 1

KIND_CONV = "conv2d"
KIND_FC = "fully-connected"
KIND_SIGMOID = "sigmoid"


class ConfigurationError(ValueError):
    """A layer specification and an input shape disagree."""


class StateError(RuntimeError):
    """backward() was called without a preceding forward()."""


class GradientError(RuntimeError):
    """An optimizer step encountered a non-finite gradient."""


def sigmoid(z):
    """Numerically stable logistic function, elementwise on an array."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Parameter:
    """A learnable array paired with a same-shape gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    Only the fields relevant to ``kind`` are meaningful; the rest stay at
    their defaults.  ``in_features=None`` on a fully-connected layer means
    "infer from whatever the previous layer produces" at build time.
    """

    kind: str
    kernel_size: int = 0
    in_channels: int = 0
    out_channels: int = 0
    stride: int = 1
    padding: int = 0
    in_features: int | None = None
    out_features: int = 0

    @staticmethod
    def conv2d(kernel_size, in_channels, out_channels, stride=1, padding=0):
        return LayerSpec(KIND_CONV, kernel_size=kernel_size,
                         in_channels=in_channels, out_channels=out_channels,
                         stride=stride, padding=padding)

    @staticmethod
    def fully_connected(out_features, in_features=None):
        return LayerSpec(KIND_FC, in_features=in_features,
                         out_features=out_features)

    @staticmethod
    def sigmoid():
        return LayerSpec(KIND_SIGMOID)

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == KIND_CONV:
            d.update(kernel_size=self.kernel_size, in_channels=self.in_channels,
                     out_channels=self.out_channels, stride=self.stride,
                     padding=self.padding)
        elif self.kind == KIND_FC:
            d.update(in_features=self.in_features, out_features=self.out_features)
        return d

    @staticmethod
    def from_dict(d):
        kind = d["kind"]
        if kind == KIND_CONV:
            return LayerSpec.conv2d(d["kernel_size"], d["in_channels"],
                                    d["out_channels"], d.get("stride", 1),
                                    d.get("padding", 0))
        if kind == KIND_FC:
            return LayerSpec.fully_connected(d["out_features"], d.get("in_features"))
        if kind == KIND_SIGMOID:
            return LayerSpec.sigmoid()
        raise ConfigurationError(f"unknown layer kind {kind!r}")


def conv_output_size(size, kernel, stride, padding):
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ConfigurationError(
            f"conv output size {out} for input {size}, kernel {kernel}, "
            f"stride {stride}, padding {padding}")
    return out


def _fan_in_uniform(rng, shape, fan_in):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


class _SigmoidLayer:
    def __init__(self, spec):
        self.spec = spec
        self._out = None

    def params(self):
        return []

    def forward(self, x):
        out = sigmoid(x)
        self._out = out
        return out

    def backward(self, grad_out):
        if self._out is None:
            raise StateError("sigmoid backward before forward")
        return grad_out * self._out * (1.0 - self._out)


class _DenseLayer:
    def __init__(self, spec, rng):
        self.spec = spec
        fin, fout = spec.in_features, spec.out_features
        self.w = Parameter(_fan_in_uniform(rng, (fin, fout), fin))
        self.b = Parameter(np.zeros(fout))
        self._x = None
        self._in_shape = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim < 2:
            raise ConfigurationError(
                f"fully-connected input needs a leading batch dimension, got shape {x.shape}")
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.spec.in_features:
            raise ConfigurationError(
                f"fully-connected expects {self.spec.in_features} features, got {flat.shape[1]}")
        self._x = flat
        self._in_shape = x.shape
        return flat @ self.w.value + self.b.value

    def backward(self, grad_out):
        if self._x is None:
            raise StateError("fully-connected backward before forward")
        self.w.grad += self._x.T @ grad_out
        self.b.grad += grad_out.sum(axis=0)
        return (grad_out @ self.w.value.T).reshape(self._in_shape)


class _ConvLayer:
    """3x3-ish convolution over (N, H, W, C) arrays via im2col."""

    def __init__(self, spec, rng):
        self.spec = spec
        k, cin, cout = spec.kernel_size, spec.in_channels, spec.out_channels
        fan_in = k * k * cin
        self.w = Parameter(_fan_in_uniform(rng, (k, k, cin, cout), fan_in))
        self.b = Parameter(np.zeros(cout))
        self._cols = None
        self._x_shape = None

    def params(self):
        return [self.w, self.b]

    def _out_hw(self, h, w):
        s = self.spec
        return (conv_output_size(h, s.kernel_size, s.stride, s.padding),
                conv_output_size(w, s.kernel_size, s.stride, s.padding))

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        s = self.spec
        if x.ndim != 4:
            raise ConfigurationError(f"conv2d input must be (N, H, W, C), got shape {x.shape}")
        n, h, w, c = x.shape
        if c != s.in_channels:
            raise ConfigurationError(f"conv2d expects {s.in_channels} channels, got {c}")
        oh, ow = self._out_hw(h, w)
        k, p, st = s.kernel_size, s.padding, s.stride
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        cols = np.empty((n, oh, ow, k * k * c))
        for i in range(k):
            for j in range(k):
                patch = xp[:, i:i + oh * st:st, j:j + ow * st:st, :]
                cols[..., (i * k + j) * c:(i * k + j + 1) * c] = patch
        self._cols = cols
        self._x_shape = x.shape
        wmat = self.w.value.reshape(k * k * c, s.out_channels)
        return cols @ wmat + self.b.value

    def backward(self, grad_out):
        if self._cols is None:
            raise StateError("conv2d backward before forward")
        s = self.spec
        n, h, w, c = self._x_shape
        k, p, st = s.kernel_size, s.padding, s.stride
        oh, ow = grad_out.shape[1:3]
        wmat = self.w.value.reshape(k * k * c, s.out_channels)

        gflat = grad_out.reshape(-1, s.out_channels)
        self.w.grad += (self._cols.reshape(-1, k * k * c).T @ gflat).reshape(self.w.value.shape)
        self.b.grad += gflat.sum(axis=0)

        gcols = grad_out @ wmat.T
        gxp = np.zeros((n, h + 2 * p, w + 2 * p, c))
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + oh * st:st, j:j + ow * st:st, :] += \
                    gcols[..., (i * k + j) * c:(i * k + j + 1) * c]
        if p:
            return gxp[:, p:-p, p:-p, :]
        return gxp


_LAYER_TYPES = {KIND_CONV: _ConvLayer, KIND_FC: _DenseLayer, KIND_SIGMOID: _SigmoidLayer}


class Network:
    """An ordered layer stack with a role tag.

    forward() caches whatever backward() needs; calling backward() again
    without a fresh forward accumulates parameter gradients on top of the
    existing buffers (that is deliberate: losses with several terms run one
    backward per term). zero_grad() clears the buffers.
    """

    def __init__(self, layers, specs, input_shape, role=""):
        self._layers = layers
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.role = role
        self._ready = False

    def forward(self, x):
        out = x
        for i, layer in enumerate(self._layers):
            try:
                out = layer.forward(out)
            except ConfigurationError as e:
                raise ConfigurationError(f"layer {i} ({layer.spec.kind}): {e}") from None
        self._ready = True
        return out

    def backward(self, grad_out):
        """Propagate a loss gradient; fills parameter .grad buffers and
        returns the gradient with respect to the network input."""
        if not self._ready:
            raise StateError(f"backward on {self.role or 'network'} before forward")
        g = grad_out
        for layer in reversed(self._layers):
            g = layer.backward(g)
        return g

    def params(self):
        out = []
        for layer in self._layers:
            out.extend(layer.params())
        return out

    def param_layers(self):
        """(layer_index, kind, parameter) triples, in checkpoint order."""
        out = []
        for i, layer in enumerate(self._layers):
            for p in layer.params():
                out.append((i, layer.spec.kind, p))
        return out

    def zero_grad(self):
        for p in self.params():
            p.grad[:] = 0.0

    def get_weights(self):
        return [p.value.copy() for p in self.params()]

    def set_weights(self, weights):
        params = self.params()
        if len(weights) != len(params):
            raise ConfigurationError(
                f"expected {len(params)} weight arrays, got {len(weights)}")
        for p, w in zip(params, weights):
            w = np.asarray(w, dtype=np.float64)
            if w.shape != p.value.shape:
                raise ConfigurationError(
                    f"weight shape {w.shape} does not match parameter shape {p.value.shape}")
            p.value[...] = w


def build_network(specs, input_shape, seed=0, role=""):
    """Instantiate a Network for inputs of shape (H, W, C).

    Walks the layer list tracking the running activation shape, inferring
    fully-connected input sizes and validating conv geometry up front, so a
    bad stack fails here rather than mid-training. Weights use fan-in-scaled
    uniform initialization from the given seed; biases start at zero.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers = []
    resolved = []
    for i, spec in enumerate(specs):
        try:
            if spec.kind == KIND_CONV:
                if len(shape) != 3:
                    raise ConfigurationError("conv2d after flattening")
                h, w, c = shape
                if c != spec.in_channels:
                    raise ConfigurationError(
                        f"expects {spec.in_channels} input channels, got {c}")
                oh = conv_output_size(h, spec.kernel_size, spec.stride, spec.padding)
                ow = conv_output_size(w, spec.kernel_size, spec.stride, spec.padding)
                shape = (oh, ow, spec.out_channels)
            elif spec.kind == KIND_FC:
                fin = int(np.prod(shape))
                if spec.in_features is None:
                    spec = LayerSpec.fully_connected(spec.out_features, fin)
                elif spec.in_features != fin:
                    raise ConfigurationError(
                        f"declares {spec.in_features} input features but receives {fin}")
                shape = (spec.out_features,)
            elif spec.kind != KIND_SIGMOID:
                raise ConfigurationError(f"unknown layer kind {spec.kind!r}")
        except ConfigurationError as e:
            raise ConfigurationError(f"layer {i} ({spec.kind}): {e}") from None
        resolved.append(spec)
        cls = _LAYER_TYPES[spec.kind]
        layers.append(cls(spec) if spec.kind == KIND_SIGMOID else cls(spec, rng))
    return Network(layers, resolved, input_shape, role=role)


class Sgd:
    """Plain gradient descent: p <- p - lr * grad."""

    def __init__(self, lr=1e-2):
        self.lr = float(lr)
        self.step_count = 0

    def step(self, nets):
        nets = _as_net_list(nets)
        _check_finite_grads(nets)
        for net in nets:
            for p in net.params():
                p.value -= self.lr * p.grad
                p.grad[:] = 0.0
        self.step_count += 1


class Adam:
    """Adam with standard moment decay constants.

    Moment buffers are keyed by parameter position, so every call to step()
    must pass the same networks in the same order.
    """

    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = None
        self._v = None

    def step(self, nets):
        nets = _as_net_list(nets)
        _check_finite_grads(nets)
        params = [p for net in nets for p in net.params()]
        if self._m is None:
            self._m = [np.zeros_like(p.value) for p in params]
            self._v = [np.zeros_like(p.value) for p in params]
        if len(params) != len(self._m):
            raise GradientError("optimizer was initialized with a different parameter set")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(params, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad ** 2
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad[:] = 0.0


def _as_net_list(nets):
    return [nets] if isinstance(nets, Network) else list(nets)


def _check_finite_grads(nets):
    for net in nets:
        for i, kind, p in net.param_layers():
            finite = np.isfinite(p.grad)
            if not finite.all():
                worst = np.abs(p.grad[finite]).max() if finite.any() else float("nan")
                raise GradientError(
                    f"non-finite gradient in layer {i} ({kind}) of "
                    f"{net.role or 'network'}: {int((~finite).sum())} bad entries, "
                    f"max finite |grad| = {worst}")


def finite_diff_check(net, x, epsilon=1e-5, tolerance=1e-4):
    """Compare analytic parameter gradients against central differences.

    Uses loss = sum of network outputs. Returns one report row per layer
    that owns parameters: {"layer", "kind", "n_params", "max_rel_error",
    "ok"} where ok means the error stayed within ``tolerance``. Relative
    error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-3); the
    floor keeps near-zero gradients from amplifying finite-difference
    noise. Report only; never raises on mismatch.
    """
    net.zero_grad()
    out = net.forward(x)
    net.backward(np.ones_like(out))
    analytic = {id(p): p.grad.copy() for p in net.params()}

    rows = {}
    for i, kind, p in net.param_layers():
        a = analytic[id(p)]
        worst = 0.0
        flat = p.value.ravel()
        aflat = a.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            lo_hi = net.forward(x).sum()
            flat[j] = orig - epsilon
            lo_lo = net.forward(x).sum()
            flat[j] = orig
            numeric = (lo_hi - lo_lo) / (2.0 * epsilon)
            denom = max(abs(aflat[j]), abs(numeric), 1e-3)
            worst = max(worst, abs(aflat[j] - numeric) / denom)
        if i in rows:
            rows[i]["n_params"] += flat.size
            rows[i]["max_rel_error"] = max(rows[i]["max_rel_error"], worst)
        else:
            rows[i] = {"layer": i, "kind": kind, "n_params": flat.size,
                       "max_rel_error": worst}
    net.zero_grad()
    for row in rows.values():
        row["ok"] = bool(row["max_rel_error"] < tolerance)
    return [rows[i] for i in sorted(rows)]


def save_network(net, path, extra=None):
    """Write a network checkpoint.

    Layout (documented in the README): a JSON object with ``format`` and
    ``version`` markers, the resolved layer specs in order, the input shape,
    and one flat float list per parameter in layer order (weight before bias
    within a layer). JSON floats round-trip float64 exactly.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "role": net.role,
        "input_shape": list(net.input_shape),
        "layers": [s.to_dict() for s in net.specs],
        "weights": [p.value.ravel().tolist() for p in net.params()],
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_network(path):
    """Read a checkpoint written by save_network; returns (Network, extra)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {doc.get('version')}")
    specs = [LayerSpec.from_dict(d) for d in doc["layers"]]
    net = build_network(specs, tuple(doc["input_shape"]), seed=0, role=doc.get("role", ""))
    weights = []
    for p, flat in zip(net.params(), doc["weights"]):
        weights.append(np.asarray(flat, dtype=np.float64).reshape(p.value.shape))
    net.set_weights(weights)
    return net, doc.get("extra", {})
