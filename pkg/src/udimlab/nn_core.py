"""Small fixed-architecture MLP with hand-written reverse-mode gradients.

Parameters live in one flat float64 buffer (``Mlp.theta``). Layer weights and
biases are views into it, so perturbing ``theta`` in place perturbs the model.
Canonical ordering: layer by layer, weight matrix (out x in, row-major) then
bias, classifier head last.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

GRAD_TOL = 1e-12

_ACTIVATIONS = {
    # name -> (f, f' expressed through the output h = f(a))
    "tanh": (np.tanh, lambda h: 1.0 - h * h),
    "relu": (lambda a: np.maximum(a, 0.0), lambda h: (h > 0.0).astype(np.float64)),
    "identity": (lambda a: a, lambda h: np.ones_like(h)),
}
LOSS_KINDS = ("ce", "mse")


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array; reject NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


class Mlp:
    """Feature extractor (affine + activation layers) followed by a linear head.

    ``layer_dims = [d_in, h_1, ..., h_k, C]``; every layer except the last uses
    ``activation``; the last is the linear classifier producing logits.
    """

    def __init__(self, layer_dims: Sequence[int], loss_kind: str = "ce",
                 activation: str = "tanh", theta: np.ndarray | None = None):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2:
            raise ValueError("layer_dims needs an input width and a class count")
        if any(d <= 0 for d in dims):
            raise ValueError(f"layer widths must be positive, got {dims}")
        if loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {loss_kind!r}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_dims = dims
        self.loss_kind = loss_kind
        self.activation = activation
        self._shapes = [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]
        self._offsets = []
        off = 0
        for o, i in self._shapes:
            self._offsets.append(off)
            off += o * i + o
        self.n_params = off
        self.theta = np.zeros(off)
        if theta is not None:
            self.set_params(theta)

    # -- structure -----------------------------------------------------------
    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self._shapes)

    @property
    def classifier_slice(self) -> slice:
        return slice(self._offsets[-1], self.n_params)

    def layer_slices(self) -> list[slice]:
        """One slice per layer covering its weight and bias."""
        return [slice(off, off + o * i + o) for off, (o, i) in zip(self._offsets, self._shapes)]

    def _unpack(self, theta: np.ndarray):
        # theta is (P,) or (B, P); returns per-layer (W, b) views
        lead = theta.shape[:-1]
        out = []
        for off, (o, i) in zip(self._offsets, self._shapes):
            W = theta[..., off:off + o * i].reshape(lead + (o, i))
            b = theta[..., off + o * i:off + o * i + o]
            out.append((W, b))
        return out

    @property
    def feature_layers(self):
        act = self.activation
        return [(W, b, act) for W, b in self._unpack(self.theta)[:-1]]

    @property
    def classifier(self):
        return self._unpack(self.theta)[-1]

    def set_params(self, theta) -> None:
        theta = as_tensor(theta, "theta")
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        self.theta[...] = theta

    def copy(self) -> "Mlp":
        return Mlp(self.layer_dims, self.loss_kind, self.activation, self.theta.copy())

    # -- forward / backward --------------------------------------------------
    def _check_inputs(self, X) -> np.ndarray:
        X = as_tensor(X, "inputs")
        if X.ndim != 2 or X.shape[1] != self.n_inputs:
            raise ValueError(f"inputs must have shape (n, {self.n_inputs}), got {X.shape}")
        return X

    def _forward(self, X: np.ndarray, theta: np.ndarray | None = None):
        theta = self.theta if theta is None else theta
        f, _ = _ACTIVATIONS[self.activation]
        layers = self._unpack(theta)
        acts = [X]
        a = X
        for W, b in layers[:-1]:
            a = f(_affine(a, W, b))
            acts.append(a)
        W, b = layers[-1]
        logits = _affine(a, W, b)
        return acts, logits, layers

    def _d_logits(self, logits: np.ndarray, y: np.ndarray) -> np.ndarray:
        onehot = np.eye(self.n_classes)[y]
        if self.loss_kind == "ce":
            return softmax(logits) - onehot
        return logits - onehot

    def _backward(self, acts, layers, d_logits, d_features=None, per_sample=False):
        """Reverse pass. Returns (param grad, input grad).

        ``d_features`` is an extra upstream gradient on the classifier input.
        With ``per_sample`` the param grad has one row per instance.
        """
        _, fprime = _ACTIVATIONS[self.activation]
        n = d_logits.shape[0]
        pieces = []
        delta = d_logits
        for l in range(len(layers) - 1, -1, -1):
            W, b = layers[l]
            a = acts[l]
            if per_sample:
                gW = np.einsum("bo,bi->boi", delta, a).reshape(n, -1)
                gb = delta
            else:
                gW = (delta.T @ a).ravel()
                gb = delta.sum(axis=0)
            pieces.append((gW, gb))
            da = delta @ W if W.ndim == 2 else np.einsum("bo,boi->bi", delta, W)
            if l == len(layers) - 1 and d_features is not None:
                da = da + d_features
            if l > 0:
                delta = da * fprime(acts[l])
        pieces.reverse()
        flat = [p for pair in pieces for p in pair]
        grad = np.concatenate(flat, axis=-1)
        return grad, da

    def forward(self, X):
        """Return ``(features, logits, probs)`` for a batch of inputs."""
        X = self._check_inputs(X)
        acts, logits, _ = self._forward(X)
        return acts[-1], logits, softmax(logits)

    def instance_losses(self, X, y) -> np.ndarray:
        X = self._check_inputs(X)
        y = self._check_labels(y, X.shape[0])
        _, logits, _ = self._forward(X)
        return self._instance_losses(logits, y)

    def _instance_losses(self, logits, y):
        if self.loss_kind == "ce":
            return logsumexp(logits) - logits[np.arange(len(y)), y]
        diff = logits - np.eye(self.n_classes)[y]
        return 0.5 * np.sum(diff * diff, axis=1)

    def _check_labels(self, y, n) -> np.ndarray:
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if y.shape[0] != n:
            raise ValueError(f"{y.shape[0]} labels for {n} inputs")
        if n == 0:
            raise ValueError("empty batch")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError("label out of range")
        return y

    def loss(self, X, y) -> float:
        return float(np.mean(self.instance_losses(X, y)))

    def grad(self, X, y) -> np.ndarray:
        """Gradient of the mean loss with respect to all parameters."""
        X = self._check_inputs(X)
        y = self._check_labels(y, X.shape[0])
        acts, logits, layers = self._forward(X)
        d = self._d_logits(logits, y) / X.shape[0]
        g, _ = self._backward(acts, layers, d)
        return g

    def loss_and_grad(self, X, y):
        X = self._check_inputs(X)
        y = self._check_labels(y, X.shape[0])
        acts, logits, layers = self._forward(X)
        d = self._d_logits(logits, y) / X.shape[0]
        g, _ = self._backward(acts, layers, d)
        return float(np.mean(self._instance_losses(logits, y))), g

    def input_grads(self, X, y, theta: np.ndarray | None = None) -> np.ndarray:
        """Row i is the gradient of instance i's own loss with respect to x_i.

        ``theta`` may be (P,) or (n, P); the latter evaluates row i at its own
        parameter vector.
        """
        X = self._check_inputs(X)
        y = self._check_labels(y, X.shape[0])
        acts, logits, layers = self._forward(X, theta)
        _, dx = self._backward(acts, layers, self._d_logits(logits, y), per_sample=True)
        return dx

    def per_sample_grads(self, X, y) -> np.ndarray:
        """(n, P) matrix of per-instance full-parameter gradients."""
        X = self._check_inputs(X)
        y = self._check_labels(y, X.shape[0])
        acts, logits, layers = self._forward(X)
        g, _ = self._backward(acts, layers, self._d_logits(logits, y), per_sample=True)
        return g

    def predict(self, X) -> np.ndarray:
        _, logits, _ = self._forward(self._check_inputs(X))
        return np.argmax(logits, axis=1)

    def accuracy(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))


def _affine(a, W, b):
    if W.ndim == 2:
        return a @ W.T + b
    return np.einsum("bi,boi->bo", a, W) + b


def logsumexp(z: np.ndarray) -> np.ndarray:
    zmax = np.max(z, axis=-1, keepdims=True)
    return (zmax + np.log(np.sum(np.exp(z - zmax), axis=-1, keepdims=True)))[..., 0]


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


@contextmanager
def shifted(m, delta: np.ndarray) -> Iterator:
    """Temporarily move ``m.theta`` by ``delta``; restores the exact bytes."""
    saved = m.theta.copy()
    m.theta += delta
    try:
        yield m
    finally:
        m.theta[...] = saved


def mlp_init(layer_dims: Sequence[int], loss_kind: str = "ce", seed: int = 0,
             activation: str = "tanh") -> Mlp:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    m = Mlp(layer_dims, loss_kind, activation)
    rng = np.random.default_rng(seed)
    for sl, (o, i) in zip(m.layer_slices(), m._shapes):
        bound = 1.0 / np.sqrt(i)
        m.theta[sl] = rng.uniform(-bound, bound, size=sl.stop - sl.start)
    return m


# ---------------------------------------------------------------------------
# Functional surface over (model, batch). ``batch`` is anything exposing
# ``inputs`` and ``labels`` (normally a DomainDataset). Data-free toy models
# accept ``batch=None``.
# ---------------------------------------------------------------------------

def forward(m: Mlp, x):
    return m.forward(x)


def _xy(batch):
    if batch is None:
        return None, None
    return batch.inputs, batch.labels


def loss(m, batch) -> float:
    return m.loss(*_xy(batch))


def loss_and_grad(m, batch):
    return m.loss_and_grad(*_xy(batch))


def grad_params(m, batch, scope: str = "all") -> np.ndarray:
    g = m.grad(*_xy(batch))
    if scope == "all":
        return g
    if scope == "classifier":
        return g[m.classifier_slice].copy()
    raise ValueError(f"unknown scope {scope!r}")


def grad_input(m: Mlp, x, y: int) -> np.ndarray:
    x = as_tensor(x, "x")
    return m.input_grads(x.reshape(1, -1), [y])[0].reshape(x.shape)


@dataclass
class GradSampleSet:
    """Per-instance classifier-head gradients with their mean and variance."""
    samples: np.ndarray
    mean: np.ndarray
    variance: np.ndarray | None
    scope: str = "classifier"

    @property
    def has_variance(self) -> bool:
        return self.variance is not None


def classifier_residual(m: Mlp, logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bias gradient of each instance's loss: probs - onehot (CE) or logits - onehot (MSE)."""
    return m._d_logits(logits, y)


def grad_variance(samples: np.ndarray) -> np.ndarray:
    """Elementwise two-pass variance with divisor n - 1.

    Deviations are taken from the first sample before the mean pass, so a
    batch of identical rows gives exact zeros.
    """
    n = samples.shape[0]
    shifted_rows = samples - samples[0]
    dev = shifted_rows - np.sum(shifted_rows, axis=0) / n
    return np.sum(dev * dev, axis=0) / (n - 1)


def per_sample_classifier_grads(m: Mlp, batch) -> GradSampleSet:
    X = m._check_inputs(batch.inputs)
    y = m._check_labels(batch.labels, X.shape[0])
    acts, logits, _ = m._forward(X)
    return _head_grads(m, acts[-1], logits, y)


def _head_grads(m, z, logits, y) -> GradSampleSet:
    r = classifier_residual(m, logits, y)
    n = r.shape[0]
    samples = np.concatenate([np.einsum("bc,bk->bck", r, z).reshape(n, -1), r], axis=1)
    mean = np.sum(samples, axis=0) / n
    var = grad_variance(samples) if n >= 2 else None
    return GradSampleSet(samples=samples, mean=mean, variance=var)


def directional_grad_diff(m, batch, v: np.ndarray, delta: float = 1e-3) -> np.ndarray:
    """Forward-difference Hessian-vector product along ``v/||v||``."""
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("direction vector is all zeros")
    if delta <= 0:
        raise ValueError("delta must be positive")
    g0 = grad_params(m, batch)
    with shifted(m, delta * (v / norm)):
        g1 = grad_params(m, batch)
    return (g1 - g0) / delta


def grad_input_of_param_grad_norm(m: Mlp, x, y: int, delta: float = 1e-3):
    """Gradient over x of ||grad_theta loss(x, theta)||, by finite differences.

    Returns ``(grad, degenerate)``; ``degenerate`` is True (and grad zero) when
    the parameter gradient is below ``GRAD_TOL``.
    """
    x = as_tensor(x, "x")
    out, flags = batch_input_grad_of_param_grad_norm(m, x.reshape(1, -1), np.array([y]), delta)
    return out[0].reshape(x.shape), bool(flags[0])


def batch_input_grad_of_param_grad_norm(m: Mlp, X, y, delta: float = 1e-3):
    """Row-wise version: every instance uses its own frozen parameter direction."""
    X = m._check_inputs(X)
    y = m._check_labels(y, X.shape[0])
    G = m.per_sample_grads(X, y)
    norms = np.linalg.norm(G, axis=1)
    degenerate = norms <= GRAD_TOL
    safe = np.where(degenerate, 1.0, norms)
    U = G / safe[:, None]
    U[degenerate] = 0.0
    dx0 = m.input_grads(X, y)
    dx1 = m.input_grads(X, y, theta=m.theta + delta * U)
    out = (dx1 - dx0) / delta
    out[degenerate] = 0.0
    return out, degenerate
