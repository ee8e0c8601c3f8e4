"""Dense networks with per-sample losses and gradients.

Parameters are kept as plain lists of float64 arrays, ordered
``[W0, b0, W1, b1, ...]`` with ``W`` shaped ``(out, in)``. Per-sample
gradients of a dense stack are never materialized unless asked for: each
layer's gradient for sample ``i`` is the outer product ``delta_i x_i^T``, so
weighted sums and inner products reduce to matrix products.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "identity")


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(z, a, kind):
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"inconsistent layer shapes: weights {self.weights.shape}, bias {self.bias.shape}"
            )

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]

    def forward(self, x):
        z = x @ self.weights.T + self.bias
        return z, _activate(z, self.activation)

    @classmethod
    def init(cls, in_size, out_size, activation, rng, zero=False):
        """Uniform fan-in init (``U(-1/sqrt(in), 1/sqrt(in))``), or all zeros."""
        if zero:
            return cls(np.zeros((out_size, in_size)), np.zeros(out_size), activation)
        bound = 1.0 / np.sqrt(in_size)
        if activation == "relu":
            bound *= np.sqrt(6.0)  # He-uniform
        w = rng.uniform(-bound, bound, size=(out_size, in_size))
        return cls(w, np.zeros(out_size), activation)


@dataclass
class TaskNetwork:
    """Feed-forward classifier whose ``feature_index`` layer output is the deep feature."""

    layers: list
    feature_index: int

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ValueError("a task network needs a feature layer and a logit layer")
        if not 0 <= self.feature_index < len(self.layers) - 1:
            raise ValueError("feature_index must point strictly before the logit layer")
        if self.layers[-1].activation != "identity":
            raise ValueError("the logit layer must use the identity activation")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_size != b.in_size:
                raise ValueError(f"layer size mismatch: {a.out_size} -> {b.in_size}")

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_size

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_size

    @property
    def feature_dim(self) -> int:
        return self.layers[self.feature_index].out_size

    def params(self) -> list:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "TaskNetwork":
        if len(params) != 2 * len(self.layers):
            raise ValueError("parameter list does not match the layer stack")
        layers = []
        for layer, w, b in zip(self.layers, params[0::2], params[1::2]):
            if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
                raise ValueError("parameter shape mismatch")
            layers.append(DenseLayer(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64),
                                     layer.activation))
        return TaskNetwork(layers, self.feature_index)

    def copy(self) -> "TaskNetwork":
        return self.with_params(self.params())

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected input of shape (n, {self.input_dim}), got {x.shape}")
        return x

    def features(self, x):
        a = self._check_input(x)
        for layer in self.layers[: self.feature_index + 1]:
            a = layer.forward(a)[1]
        return a

    def forward(self, x):
        return forward(self, x)


def init_task_network(sizes, rng, feature_index=None) -> TaskNetwork:
    """Build ``sizes[0] -> ... -> sizes[-1]`` with ReLU hidden layers and identity logits.

    The feature layer defaults to the last hidden layer.
    """
    if len(sizes) < 3:
        raise ValueError("need at least input, one hidden and an output size")
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = "identity" if i == len(sizes) - 2 else "relu"
        layers.append(DenseLayer.init(a, b, act, rng))
    if feature_index is None:
        feature_index = len(layers) - 2
    return TaskNetwork(layers, feature_index)


def _forward_cache(net, x):
    x = net._check_input(x)
    inputs, pre, post = [], [], []
    a = x
    for layer in net.layers:
        inputs.append(a)
        z, a = layer.forward(a)
        pre.append(z)
        post.append(a)
    return inputs, pre, post


def forward(net: TaskNetwork, x):
    """Return ``(features, logits)`` for a batch of flattened inputs."""
    _, _, post = _forward_cache(net, x)
    logits = post[-1]
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    return post[net.feature_index], logits


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be a 1-d integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    return labels


def per_sample_loss(logits, labels):
    """Softmax cross-entropy per row."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    return -log_softmax(logits)[np.arange(len(labels)), labels]


@dataclass
class PerSampleGrads:
    """Per-sample gradients of a dense stack in factored form.

    For layer ``l`` and sample ``i`` the weight gradient is
    ``outer(deltas[l][i], inputs[l][i])`` and the bias gradient is ``deltas[l][i]``.
    """

    inputs: list
    deltas: list
    losses: np.ndarray

    @property
    def n(self) -> int:
        return len(self.losses)

    def sample(self, i) -> list:
        out = []
        for x, d in zip(self.inputs, self.deltas):
            out += [np.outer(d[i], x[i]), d[i].copy()]
        return out

    def materialize(self) -> list:
        return [self.sample(i) for i in range(self.n)]

    def weighted_mean(self, weights) -> list:
        """``(1/n) * sum_i weights[i] * grad_i``, parameter-shaped."""
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (self.n,):
            raise ValueError(f"expected {self.n} weights, got shape {weights.shape}")
        out = []
        for x, d in zip(self.inputs, self.deltas):
            wd = d * weights[:, None]
            out += [wd.T @ x / self.n, wd.sum(axis=0) / self.n]
        return out

    def dot(self, grads) -> np.ndarray:
        """Inner product of every per-sample gradient with one parameter-shaped vector."""
        r = np.zeros(self.n)
        for x, d, gw, gb in zip(self.inputs, self.deltas, grads[0::2], grads[1::2]):
            r += np.einsum("ij,ij->i", d @ gw, x) + d @ gb
        return r


def per_sample_grad(net: TaskNetwork, x, labels) -> PerSampleGrads:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("per_sample_grad needs a nonempty 2-d batch")
    inputs, pre, post = _forward_cache(net, x)
    labels = _check_labels(labels, net.num_classes)
    logp = log_softmax(post[-1])
    losses = -logp[np.arange(len(labels)), labels]
    delta = np.exp(logp)
    delta[np.arange(len(labels)), labels] -= 1.0
    deltas = [None] * len(net.layers)
    deltas[-1] = delta
    for l in range(len(net.layers) - 1, 0, -1):
        up = deltas[l] @ net.layers[l].weights
        prev = net.layers[l - 1]
        deltas[l - 1] = up * _activation_grad(pre[l - 1], post[l - 1], prev.activation)
    return PerSampleGrads(inputs, deltas, losses)


def loss_and_grad(net, x, labels):
    """Mean loss and its gradient."""
    psg = per_sample_grad(net, x, labels)
    return psg.losses.mean(), psg.weighted_mean(np.ones(psg.n))


@dataclass
class SgdState:
    velocity: list
    momentum: float = 0.9
    weight_decay: float = 5e-4
    base_lr: float = 0.1

    @classmethod
    def zeros_like(cls, params, momentum=0.9, weight_decay=5e-4, base_lr=0.1):
        return cls([np.zeros_like(p) for p in params], momentum, weight_decay, base_lr)


def sgd_step(params, grads, state: SgdState, lr):
    """Momentum SGD with L2 folded into the gradient; updates ``state.velocity`` in place."""
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ValueError("params, grads and velocity must align")
    new = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.velocity[i].shape:
            raise ValueError("shape mismatch in sgd_step")
        g = g + state.weight_decay * p
        v = state.momentum * state.velocity[i] + g
        state.velocity[i] = v
        new.append(p - lr * v)
    return new


def cosine_lr(t, T, lr0):
    if not 0 <= t <= T:
        raise ValueError(f"iteration {t} outside [0, {T}]")
    if T == 0:
        return lr0
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * t / T))


def flatten(params) -> np.ndarray:
    return np.concatenate([np.ravel(p) for p in params]) if params else np.zeros(0)


def unflatten(vec, like) -> list:
    out, pos = [], 0
    for p in like:
        out.append(np.asarray(vec[pos:pos + p.size], dtype=np.float64).reshape(p.shape))
        pos += p.size
    if pos != len(vec):
        raise ValueError("vector length does not match parameter shapes")
    return out


def sq_norm(params) -> float:
    return float(sum(np.vdot(p, p) for p in params))


def dot_params(a, b) -> float:
    return float(sum(np.vdot(x, y) for x, y in zip(a, b)))
