"""Small dense feed-forward networks with hand-written reverse mode.

Inputs can be a single vector ``(d,)`` or a batch ``(N, d)``; weights are
stored as ``(out, in)`` so a batch forward is ``X @ W.T + b``. Everything is
float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch

ACTIVATIONS = ("relu", "identity")


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray | None
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class DenseNet:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if b.W.shape[1] != a.W.shape[0]:
                raise DimensionMismatch(f"layer chain broken: {a.W.shape} -> {b.W.shape}")
        for layer in self.layers:
            if layer.b is not None and layer.b.shape != (layer.W.shape[0],):
                raise DimensionMismatch(f"bias shape {layer.b.shape} for weight {layer.W.shape}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [l.W.shape[0] for l in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.W)
            if layer.b is not None:
                out.append(layer.b)
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.W.copy(), None if l.b is None else l.b.copy(), l.activation)
                         for l in self.layers])

    def __call__(self, x):
        return forward(self, x)

    def __eq__(self, other):
        if not isinstance(other, DenseNet) or len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.activation != b.activation or not np.array_equal(a.W, b.W):
                return False
            if (a.b is None) != (b.b is None):
                return False
            if a.b is not None and not np.array_equal(a.b, b.b):
                return False
        return True


# A GradientSet is a list of (dW, db) pairs, db None for bias-free layers.
GradientSet = list


def init(sizes, seed=0, activation="relu", output_activation="identity",
         bias=True, rng=None) -> DenseNet:
    """Glorot-uniform weights, zero biases.

    ``sizes`` is the full node list, e.g. ``[3, 128, 128, 128, 12]``.
    """
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ValueError(f"bad layer sizes {sizes}")
    rng = np.random.default_rng(seed) if rng is None else rng
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-lim, lim, size=(fan_out, fan_in))
        b = np.zeros(fan_out) if bias else None
        act = output_activation if i == len(sizes) - 2 else activation
        layers.append(Layer(W, b, act))
    return DenseNet(layers)


def linear(W) -> DenseNet:
    """Single bias-free identity layer holding ``W``."""
    return DenseNet([Layer(np.asarray(W, dtype=float), None, "identity")])


def _check_input(net, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.input_dim or x.ndim not in (1, 2):
        raise DimensionMismatch(f"expected input dim {net.input_dim}, got shape {x.shape}")
    return x


def forward_cached(net: DenseNet, x):
    """Forward pass returning ``(y, cache)``; the cache feeds ``backward_cached``."""
    a = _check_input(net, x)
    cache = []
    for layer in net.layers:
        z = a @ layer.W.T
        if layer.b is not None:
            z = z + layer.b
        cache.append((a, z))
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return a, cache


def forward(net: DenseNet, x):
    x = np.asarray(x, dtype=float)
    if x.ndim > 2:
        lead = x.shape[:-1]
        return forward_cached(net, x.reshape(-1, x.shape[-1]))[0].reshape(*lead, -1)
    return forward_cached(net, x)[0]


def backward_cached(net: DenseNet, cache, upstream):
    """Gradients of ``sum(upstream * y)`` w.r.t. parameters and input."""
    g = np.asarray(upstream, dtype=float)
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        a, z = cache[i]
        if layer.activation == "relu":
            g = g * (z > 0.0)
        if g.ndim == 1:
            dW = np.outer(g, a)
            db = g.copy() if layer.b is not None else None
        else:
            dW = g.T @ a
            db = g.sum(axis=0) if layer.b is not None else None
        grads[i] = (dW, db)
        g = g @ layer.W
    return grads, g


def backward(net: DenseNet, x, upstream):
    """Exact reverse-mode gradients of ``upstream . forward(net, x)``.

    Returns ``(grads, dx)``. The relu subgradient at exactly 0 is 0.
    """
    y, cache = forward_cached(net, x)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != y.shape:
        raise DimensionMismatch(f"upstream shape {upstream.shape} != output shape {y.shape}")
    return backward_cached(net, cache, upstream)


def zero_grads(net: DenseNet) -> GradientSet:
    return [(np.zeros_like(l.W), None if l.b is None else np.zeros_like(l.b)) for l in net.layers]


def add_grads(acc: GradientSet, g: GradientSet) -> None:
    for (aW, ab), (gW, gb) in zip(acc, g):
        aW += gW
        if ab is not None:
            ab += gb


def _check_congruent(net, grads):
    if len(grads) != len(net.layers):
        raise DimensionMismatch("gradient set does not match network depth")
    for layer, (dW, db) in zip(net.layers, grads):
        if dW.shape != layer.W.shape or (layer.b is not None and (db is None or db.shape != layer.b.shape)):
            raise DimensionMismatch("gradient shapes do not match network")


def sgd_step(net: DenseNet, grads: GradientSet, lr: float) -> DenseNet:
    """Return a new network with every parameter moved by ``-lr * grad``."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    _check_congruent(net, grads)
    out = net.copy()
    sgd_step_(out, grads, lr)
    return out


def sgd_step_(net: DenseNet, grads: GradientSet, lr: float) -> None:
    """In-place variant used by the trainers."""
    for layer, (dW, db) in zip(net.layers, grads):
        layer.W -= lr * dW
        if layer.b is not None:
            layer.b -= lr * db


def to_dict(net: DenseNet) -> dict:
    return {
        "shapes": [list(l.W.shape) for l in net.layers],
        "weights": [l.W.tolist() for l in net.layers],
        "biases": [None if l.b is None else l.b.tolist() for l in net.layers],
        "activations": [l.activation for l in net.layers],
    }


def from_dict(d: dict) -> DenseNet:
    layers = []
    for shape, W, b, act in zip(d["shapes"], d["weights"], d["biases"], d["activations"]):
        W = np.array(W, dtype=float).reshape(shape)
        b = None if b is None else np.array(b, dtype=float)
        layers.append(Layer(W, b, act))
    return DenseNet(layers)
