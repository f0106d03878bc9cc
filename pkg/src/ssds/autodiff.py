"""Minimal reverse-mode autodiff on numpy arrays, plus a small ReLU MLP.

The engine is tape-free in the micrograd style: each Tensor records its parents
and a backward closure, and gradients flow by reverse topological traversal.
Everything is float64.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = [
    "Tensor",
    "relu",
    "matmul",
    "cross_entropy",
    "MlpModel",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class CheckpointError(IOError):
    """Raised for truncated or malformed checkpoint files."""


class Tensor:
    """A numpy array plus an accumulated gradient and a backward rule."""

    __slots__ = ("value", "grad", "_backward", "_prev")

    def __init__(self, value, _prev=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self._backward = lambda: None
        self._prev = _prev

    @property
    def shape(self):
        return self.value.shape

    def _unbroadcast(self, g):
        """Sum a gradient down to this tensor's shape (undo numpy broadcasting)."""
        while g.ndim > self.value.ndim:
            g = g.sum(axis=0)
        for ax, n in enumerate(self.value.shape):
            if n == 1 and g.shape[ax] != 1:
                g = g.sum(axis=ax, keepdims=True)
        return g

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.value + other.value, (self, other))

        def _backward():
            self.grad += self._unbroadcast(out.grad)
            other.grad += other._unbroadcast(out.grad)

        out._backward = _backward
        return out

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.value * other.value, (self, other))

        def _backward():
            self.grad += self._unbroadcast(other.value * out.grad)
            other.grad += other._unbroadcast(self.value * out.grad)

        out._backward = _backward
        return out

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else Tensor(-np.asarray(other)))

    def sum(self, axis=None):
        out = Tensor(self.value.sum(axis=axis), (self,))

        def _backward():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            self.grad += np.broadcast_to(g, self.value.shape)

        out._backward = _backward
        return out

    def backward(self, grad=None):
        """Accumulate gradients of this tensor into every reachable parent."""
        topo, seen = [], set()

        def build(t):
            if id(t) not in seen:
                seen.add(id(t))
                for p in t._prev:
                    build(p)
                topo.append(t)

        build(self)
        self.grad = (
            np.ones_like(self.value) if grad is None
            else np.asarray(grad, dtype=np.float64)
        )
        for t in reversed(topo):
            t._backward()


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value @ b.value, (a, b))

    def _backward():
        a.grad += out.grad @ b.value.T
        b.grad += a.value.T @ out.grad

    out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.value, 0.0), (x,))

    def _backward():
        # subgradient 0 at the kink
        x.grad += (x.value > 0.0) * out.grad

    out._backward = _backward
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample softmax cross entropy: (B, K) logits, (B,) integer labels -> (B,)."""
    labels = np.asarray(labels)
    z = logits.value
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    losses = logsumexp[:, 0] - z[np.arange(len(labels)), labels]
    out = Tensor(losses, (logits,))

    def _backward():
        probs = np.exp(z - logsumexp)
        probs[np.arange(len(labels)), labels] -= 1.0
        logits.grad += probs * out.grad[:, None]

    out._backward = _backward
    return out


class MlpModel:
    """Fully connected ReLU network with a linear output layer.

    Weights use the uniform +-sqrt(6/(fan_in+fan_out)) initialization, biases
    start at zero.  Parameters live in `weights`/`biases` as plain arrays;
    `forward` wraps them in Tensors so one backward pass yields gradients with
    respect to both the parameters and the (possibly perturbed) inputs.
    """

    def __init__(self, layer_sizes, rng=None):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.layer_sizes = list(layer_sizes)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def num_params(self):
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def flatten(self):
        chunks = []
        for w, b in zip(self.weights, self.biases):
            chunks.append(w.ravel())
            chunks.append(b.ravel())
        return np.concatenate(chunks)

    def unflatten(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_params:
            raise ValueError(f"expected {self.num_params} parameters, got {vec.size}")
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = vec[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = vec[pos:pos + b.size].copy()
            pos += b.size

    def forward(self, inputs, labels):
        """Per-sample losses plus the tensors needed for gradients.

        Returns (losses, input_tensor, param_tensors); call losses.backward()
        (optionally with a row-weight vector) and read .grad off the rest.
        """
        x = Tensor(inputs)
        params = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            wt, bt = Tensor(w), Tensor(b)
            params.extend((wt, bt))
            h = matmul(h, wt) + bt
            if i != last:
                h = relu(h)
        losses = cross_entropy(h, labels)
        return losses, x, params

    def loss_and_grads(self, inputs, labels, weight=None):
        """Mean-free batch totals: per-sample losses, d/d(inputs), d/d(flat params)."""
        losses, x, params = self.forward(inputs, labels)
        total = losses if weight is None else losses * weight
        total.sum().backward()
        grad_params = np.concatenate([p.grad.ravel() for p in params])
        return losses.value, x.grad, grad_params

    def predict(self, inputs):
        h = np.asarray(inputs, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = np.maximum(h, 0.0)
        return h.argmax(axis=1)


_MAGIC = b"SSDSCKPT"
_VERSION = 1


def save_checkpoint(model: MlpModel, path):
    """Binary checkpoint: magic, u32 version, u32 layer count, per-layer u32
    (fan_in, fan_out) then row-major f64 weights followed by f64 biases.
    Little-endian throughout."""
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(model.weights))]
    for w, b in zip(model.weights, model.biases):
        parts.append(struct.pack("<II", w.shape[0], w.shape[1]))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> MlpModel:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, n_layers = struct.unpack_from("<II", data, 8)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 16
    weights, biases, sizes = [], [], None
    for _ in range(n_layers):
        if pos + 8 > len(data):
            raise CheckpointError(f"{path}: truncated header")
        fan_in, fan_out = struct.unpack_from("<II", data, pos)
        pos += 8
        need = 8 * (fan_in * fan_out + fan_out)
        if pos + need > len(data):
            raise CheckpointError(f"{path}: truncated layer data")
        w = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=pos)
        pos += 8 * fan_in * fan_out
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=pos)
        pos += 8 * fan_out
        weights.append(w.reshape(fan_in, fan_out).copy())
        biases.append(b.copy())
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    sizes = [weights[0].shape[0]] + [w.shape[1] for w in weights]
    model = MlpModel(sizes)
    model.weights, model.biases = weights, biases
    return model
