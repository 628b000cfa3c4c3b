"""ReLU MLP classifiers stored as flat parameter vectors.

Layout is layer-major: ``W_0`` (fan_in x fan_out, row-major), ``b_0``,
``W_1``, ``b_1``, ... The local optimiser is plain mini-batch SGD (no momentum,
no weight decay).
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .autodiff import DimensionError, Tensor, backward, matmul, relu, softmax_cross_entropy
from .rng import derive_rng


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dims: tuple = (32, 32)
    num_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer widths must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    @property
    def sizes(self):
        return np.array((self.input_dim, *self.hidden_dims, self.num_classes), dtype=np.int64)

    @property
    def num_params(self):
        s = self.sizes
        return int(sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1)))

    def layer_slices(self):
        """[(weight_slice, bias_slice), ...] into the flat vector."""
        out = []
        off = 0
        s = [int(v) for v in self.sizes]
        for fi, fo in zip(s[:-1], s[1:]):
            w = slice(off, off + fi * fo)
            off += fi * fo
            b = slice(off, off + fo)
            off += fo
            out.append((w, b))
        return out

    def head_slice(self):
        """Coordinates of the final (classification) layer."""
        w, b = self.layer_slices()[-1]
        return slice(w.start, b.stop)


def unflatten(params, config):
    s = [int(v) for v in config.sizes]
    layers = []
    for (ws, bs), fi, fo in zip(config.layer_slices(), s[:-1], s[1:]):
        layers.append((params[ws].reshape(fi, fo).copy(), params[bs].copy()))
    return layers


def flatten(layers):
    return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])


def init_model(config, seed):
    """Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) weights, zero biases."""
    rng = derive_rng(seed, "init")
    s = [int(v) for v in config.sizes]
    layers = []
    for fi, fo in zip(s[:-1], s[1:]):
        bound = np.sqrt(6.0 / fi)
        layers.append((rng.uniform(-bound, bound, size=(fi, fo)), np.zeros(fo)))
    return flatten(layers)


def _check_batch(params, config, X, y=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != config.input_dim:
        raise DimensionError(f"features of shape {X.shape} do not match input_dim={config.input_dim}")
    if params.shape != (config.num_params,):
        raise DimensionError(f"expected {config.num_params} params, got {params.shape}")
    if y is None:
        return X
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise DimensionError("features and labels differ in length")
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if y.min() < 0 or y.max() >= config.num_classes:
        raise IndexError("label out of range")
    return X, y


def logits(params, config, X):
    X = _check_batch(params, config, X)
    return _kernels.logits(params, config.sizes, X)


def loss_and_grad(params, config, X, y):
    """Mean cross-entropy over the batch and its gradient (kernel path)."""
    X, y = _check_batch(params, config, X, y)
    return _kernels.loss_grad(params, config.sizes, X, y)


def loss_and_grad_tape(params, config, X, y):
    """Same quantity as :func:`loss_and_grad`, computed with the autodiff tape."""
    X, y = _check_batch(params, config, X, y)
    leaves = []
    a = Tensor(X)
    layers = unflatten(params, config)
    for i, (W, b) in enumerate(layers):
        Wt = Tensor(W, requires_grad=True)
        bt = Tensor(b, requires_grad=True)
        leaves += [Wt, bt]
        a = matmul(a, Wt) + bt
        if i < len(layers) - 1:
            a = relu(a)
    loss = softmax_cross_entropy(a, y)
    grads = backward(loss)
    flat = np.concatenate([grads[t].ravel() for t in leaves])
    return float(loss.data), flat


def predict(params, config, X):
    """Argmax of the logits; ties go to the smallest class index."""
    return np.argmax(logits(params, config, X), axis=1)


def accuracy(params, config, X, y):
    return float(np.mean(predict(params, config, X) == np.asarray(y)))


def batch_order(n, epoch, seed):
    return derive_rng(seed, "shuffle", epoch).permutation(n)


def train_local(params, config, X, y, epochs, lr, batch_size, seed, prox=None, grad_mask=None,
                grad_hook=None, epoch_hook=None):
    """Mini-batch SGD with a seed-driven per-epoch shuffle.

    ``prox=(center, mu)`` adds ``mu * (w - center)`` to every gradient.
    ``grad_mask`` zeroes gradient coordinates where it is False.
    ``grad_hook(g)`` may return a corrected gradient (control variates).
    ``epoch_hook(w)`` runs after each epoch and may return replacement params.
    """
    if epochs < 0 or lr < 0:
        raise ValueError("epochs and lr must be non-negative")
    w = np.array(params, dtype=np.float64)
    if epochs == 0 or lr == 0:
        return w
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    _check_batch(w, config, X[:1], y[:1])
    sizes = config.sizes
    for epoch in range(epochs):
        order = batch_order(n, epoch, seed)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, g = _kernels.loss_grad(w, sizes, X[idx], y[idx])
            if prox is not None and prox[1] != 0:
                center, mu = prox
                g = g + mu * (w - center)
            if grad_hook is not None:
                g = grad_hook(g)
            if grad_mask is not None:
                g = np.where(grad_mask, g, 0.0)
            w = w - lr * g
        if epoch_hook is not None:
            w = epoch_hook(w)
    return w


def num_steps(n, epochs, batch_size):
    return epochs * (-(-n // batch_size))
