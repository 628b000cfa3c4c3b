"""Hot MLP kernels over flat parameter vectors.

Each public function has a pure-numpy implementation and a numba @njit twin.
The numba path is used when numba imports and ``PFLSIM_NUMBA`` is not set to
``0``. Both paths follow the same conventions:

* parameters are laid out layer-major: ``W_0`` (fan_in x fan_out, row-major),
  ``b_0``, ``W_1``, ``b_1``, ...
* hidden layers use ReLU with derivative 0 at exactly 0, the output layer is
  linear (logits).
* losses are softmax cross-entropy with log-sum-exp stabilisation.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _flag_enabled():
    return os.environ.get("PFLSIM_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _flag_enabled()


def backend():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy path


def _np_layers(params, sizes):
    out = []
    off = 0
    for fi, fo in zip(sizes[:-1], sizes[1:]):
        W = params[off:off + fi * fo].reshape(fi, fo)
        off += fi * fo
        b = params[off:off + fo]
        off += fo
        out.append((W, b))
    return out


def _np_forward_acts(params, sizes, X):
    layers = _np_layers(params, sizes)
    acts = [X]
    a = X
    for i, (W, b) in enumerate(layers):
        z = a @ W + b
        if i < len(layers) - 1:
            z = np.maximum(z, 0.0)
        acts.append(z)
        a = z
    return layers, acts


def _np_log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def np_logits(params, sizes, X):
    return _np_forward_acts(params, sizes, X)[1][-1]


def _np_output_delta(logits, y):
    logp = _np_log_softmax(logits)
    n = logits.shape[0]
    losses = -logp[np.arange(n), y]
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    return losses, delta


def np_loss_grad(params, sizes, X, y):
    layers, acts = _np_forward_acts(params, sizes, X)
    n = X.shape[0]
    losses, delta = _np_output_delta(acts[-1], y)
    delta /= n
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a = acts[i]
        grads.append(delta.sum(axis=0))
        grads.append((a.T @ delta).ravel())
        if i > 0:
            delta = (delta @ W.T) * (a > 0.0)
    grads.reverse()
    return losses.mean(), np.concatenate(grads)


def np_per_example_grads(params, sizes, X, y):
    layers, acts = _np_forward_acts(params, sizes, X)
    n = X.shape[0]
    losses, delta = _np_output_delta(acts[-1], y)
    blocks = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a = acts[i]
        blocks.append(delta.copy())
        blocks.append((a[:, :, None] * delta[:, None, :]).reshape(n, -1))
        if i > 0:
            delta = (delta @ W.T) * (a > 0.0)
    blocks.reverse()
    return losses, np.concatenate(blocks, axis=1)


def np_input_grad(params, sizes, X, y):
    """Per-example losses and d(sum of losses)/dX."""
    layers, acts = _np_forward_acts(params, sizes, X)
    losses, delta = _np_output_delta(acts[-1], y)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        delta = delta @ W.T
        if i > 0:
            delta = delta * (acts[i] > 0.0)
    return losses, delta


def _np_deltas(layers, acts, y):
    losses, delta = _np_output_delta(acts[-1], y)
    out = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        out[i] = delta
        if i > 0:
            delta = (delta @ layers[i][0].T) * (acts[i] > 0.0)
    return losses, out


def np_grad_diff_norms(params, sizes, X1, y1, X2, y2):
    """Row-wise ||grad L(X1_i, y1_i) - grad L(X2_i, y2_i)||_2 over all params.

    Uses ||a1 (x) d1 - a2 (x) d2||^2 = |a1|^2|d1|^2 + |a2|^2|d2|^2 - 2(a1.a2)(d1.d2)
    per layer, so per-example gradients are never materialised.
    """
    layers, acts1 = _np_forward_acts(params, sizes, X1)
    _, acts2 = _np_forward_acts(params, sizes, X2)
    _, d1 = _np_deltas(layers, acts1, y1)
    _, d2 = _np_deltas(layers, acts2, y2)
    sq = np.zeros(X1.shape[0])
    for i in range(len(layers)):
        a1, a2 = acts1[i], acts2[i]
        e1, e2 = d1[i], d2[i]
        sq += ((a1 * a1).sum(1) * (e1 * e1).sum(1) + (a2 * a2).sum(1) * (e2 * e2).sum(1)
               - 2.0 * (a1 * a2).sum(1) * (e1 * e2).sum(1))
        sq += ((e1 - e2) ** 2).sum(1)
    return np.sqrt(np.maximum(sq, 0.0))


def np_pairwise_sq_dists(V):
    n = V.shape[0]
    D = np.zeros((n, n))
    for i in range(n):
        diff = V - V[i]
        D[i] = np.einsum("ij,ij->i", diff, diff)
    return D


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_forward_acts(params, sizes, X):
        acts = [np.ascontiguousarray(X)]
        off = 0
        nl = sizes.shape[0] - 1
        for l in range(nl):
            fi = sizes[l]
            fo = sizes[l + 1]
            W = params[off:off + fi * fo].reshape((fi, fo))
            b = params[off + fi * fo:off + fi * fo + fo]
            z = np.dot(acts[l], W)
            n = z.shape[0]
            for r in range(n):
                for j in range(fo):
                    v = z[r, j] + b[j]
                    if l < nl - 1 and v < 0.0:
                        v = 0.0
                    z[r, j] = v
            off += fi * fo + fo
            acts.append(z)
        return acts

    @njit(cache=True)
    def _nb_output_delta(logits, y):
        n, c = logits.shape
        losses = np.empty(n)
        delta = np.empty((n, c))
        for r in range(n):
            m = logits[r, 0]
            for j in range(1, c):
                if logits[r, j] > m:
                    m = logits[r, j]
            s = 0.0
            for j in range(c):
                s += np.exp(logits[r, j] - m)
            lse = np.log(s)
            for j in range(c):
                delta[r, j] = np.exp(logits[r, j] - m - lse)
            losses[r] = -(logits[r, y[r]] - m - lse)
            delta[r, y[r]] -= 1.0
        return losses, delta

    @njit(cache=True)
    def _nb_offsets(sizes):
        nl = sizes.shape[0] - 1
        offs = np.empty(nl, dtype=np.int64)
        off = 0
        for l in range(nl):
            offs[l] = off
            off += sizes[l] * sizes[l + 1] + sizes[l + 1]
        return offs, off

    @njit(cache=True)
    def _nb_backprop_delta(params, sizes, offs, l, delta, a_prev):
        # delta for layer l -> delta for layer l-1 (through ReLU of a_prev)
        fi = sizes[l]
        fo = sizes[l + 1]
        off = offs[l]
        Wt = np.ascontiguousarray(params[off:off + fi * fo].reshape((fi, fo)).T)
        out = np.dot(delta, Wt)
        n = out.shape[0]
        for r in range(n):
            for k in range(fi):
                if not a_prev[r, k] > 0.0:
                    out[r, k] = 0.0
        return out

    @njit(cache=True)
    def nb_logits(params, sizes, X):
        return _nb_forward_acts(params, sizes, X)[-1]

    @njit(cache=True)
    def nb_loss_grad(params, sizes, X, y):
        acts = _nb_forward_acts(params, sizes, X)
        n = X.shape[0]
        losses, delta = _nb_output_delta(acts[-1], y)
        offs, total = _nb_offsets(sizes)
        grad = np.zeros(total)
        nl = sizes.shape[0] - 1
        for r in range(n):
            for j in range(delta.shape[1]):
                delta[r, j] /= n
        for l in range(nl - 1, -1, -1):
            fi = sizes[l]
            fo = sizes[l + 1]
            a = acts[l]
            off = offs[l]
            gW = np.dot(np.ascontiguousarray(a.T), delta)
            for k in range(fi):
                for j in range(fo):
                    grad[off + k * fo + j] = gW[k, j]
            for r in range(n):
                for j in range(fo):
                    grad[off + fi * fo + j] += delta[r, j]
            if l > 0:
                delta = _nb_backprop_delta(params, sizes, offs, l, delta, a)
        return losses.mean(), grad

    @njit(cache=True)
    def nb_per_example_grads(params, sizes, X, y):
        acts = _nb_forward_acts(params, sizes, X)
        n = X.shape[0]
        losses, delta = _nb_output_delta(acts[-1], y)
        offs, total = _nb_offsets(sizes)
        G = np.zeros((n, total))
        nl = sizes.shape[0] - 1
        for l in range(nl - 1, -1, -1):
            fi = sizes[l]
            fo = sizes[l + 1]
            a = acts[l]
            off = offs[l]
            for r in range(n):
                for k in range(fi):
                    ak = a[r, k]
                    for j in range(fo):
                        G[r, off + k * fo + j] = ak * delta[r, j]
                for j in range(fo):
                    G[r, off + fi * fo + j] = delta[r, j]
            if l > 0:
                delta = _nb_backprop_delta(params, sizes, offs, l, delta, a)
        return losses, G

    @njit(cache=True)
    def nb_input_grad(params, sizes, X, y):
        acts = _nb_forward_acts(params, sizes, X)
        losses, delta = _nb_output_delta(acts[-1], y)
        offs, _ = _nb_offsets(sizes)
        nl = sizes.shape[0] - 1
        for l in range(nl - 1, 0, -1):
            delta = _nb_backprop_delta(params, sizes, offs, l, delta, acts[l])
        fi = sizes[0]
        fo = sizes[1]
        Wt = np.ascontiguousarray(params[:fi * fo].reshape((fi, fo)).T)
        out = np.dot(delta, Wt)
        return losses, out

    @njit(cache=True)
    def _nb_deltas(params, sizes, offs, acts, y):
        nl = sizes.shape[0] - 1
        losses, delta = _nb_output_delta(acts[-1], y)
        out = [delta]
        for l in range(nl - 1, 0, -1):
            delta = _nb_backprop_delta(params, sizes, offs, l, delta, acts[l])
            out.append(delta)
        out.reverse()
        return out

    @njit(cache=True)
    def nb_grad_diff_norms(params, sizes, X1, y1, X2, y2):
        acts1 = _nb_forward_acts(params, sizes, X1)
        acts2 = _nb_forward_acts(params, sizes, X2)
        offs, _ = _nb_offsets(sizes)
        d1 = _nb_deltas(params, sizes, offs, acts1, y1)
        d2 = _nb_deltas(params, sizes, offs, acts2, y2)
        n = X1.shape[0]
        out = np.zeros(n)
        nl = sizes.shape[0] - 1
        for r in range(n):
            sq = 0.0
            for l in range(nl):
                a1 = acts1[l]
                a2 = acts2[l]
                e1 = d1[l]
                e2 = d2[l]
                aa1 = 0.0
                aa2 = 0.0
                a12 = 0.0
                for k in range(a1.shape[1]):
                    aa1 += a1[r, k] * a1[r, k]
                    aa2 += a2[r, k] * a2[r, k]
                    a12 += a1[r, k] * a2[r, k]
                ee1 = 0.0
                ee2 = 0.0
                e12 = 0.0
                bb = 0.0
                for j in range(e1.shape[1]):
                    ee1 += e1[r, j] * e1[r, j]
                    ee2 += e2[r, j] * e2[r, j]
                    e12 += e1[r, j] * e2[r, j]
                    t = e1[r, j] - e2[r, j]
                    bb += t * t
                sq += aa1 * ee1 + aa2 * ee2 - 2.0 * a12 * e12 + bb
            # clamp rounding below zero; NaN passes through
            out[r] = np.sqrt(0.0 if sq < 0.0 else sq)
        return out

    @njit(cache=True)
    def nb_pairwise_sq_dists(V):
        n, d = V.shape
        D = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                s = 0.0
                for k in range(d):
                    t = V[i, k] - V[j, k]
                    s += t * t
                D[i, j] = s
                D[j, i] = s
        return D


# ---------------------------------------------------------------------------
# dispatch


def _prep(params, sizes, X, y=None):
    params = np.ascontiguousarray(params, dtype=np.float64)
    sizes = np.ascontiguousarray(sizes, dtype=np.int64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    if y is None:
        return params, sizes, X
    return params, sizes, X, np.ascontiguousarray(y, dtype=np.int64)


def logits(params, sizes, X):
    args = _prep(params, sizes, X)
    return nb_logits(*args) if USE_NUMBA else np_logits(*args)


def loss_grad(params, sizes, X, y):
    """Mean cross-entropy over the batch and its gradient w.r.t. params."""
    args = _prep(params, sizes, X, y)
    if USE_NUMBA:
        loss, g = nb_loss_grad(*args)
        return float(loss), g
    loss, g = np_loss_grad(*args)
    return float(loss), g


def per_example_grads(params, sizes, X, y):
    """Per-example losses (n,) and per-example gradients (n, P)."""
    args = _prep(params, sizes, X, y)
    return nb_per_example_grads(*args) if USE_NUMBA else np_per_example_grads(*args)


def input_grad(params, sizes, X, y):
    """Per-example losses (n,) and the gradient of their sum w.r.t. X."""
    args = _prep(params, sizes, X, y)
    return nb_input_grad(*args) if USE_NUMBA else np_input_grad(*args)


def pairwise_sq_dists(V):
    V = np.ascontiguousarray(V, dtype=np.float64)
    return nb_pairwise_sq_dists(V) if USE_NUMBA else np_pairwise_sq_dists(V)


def grad_diff_norms(params, sizes, X1, y1, X2, y2):
    """Per-row L2 norm of the difference of two per-example parameter gradients."""
    params, sizes, X1, y1 = _prep(params, sizes, X1, y1)
    X2 = np.ascontiguousarray(X2, dtype=np.float64)
    y2 = np.ascontiguousarray(y2, dtype=np.int64)
    if USE_NUMBA:
        return nb_grad_diff_norms(params, sizes, X1, y1, X2, y2)
    return np_grad_diff_norms(params, sizes, X1, y1, X2, y2)
