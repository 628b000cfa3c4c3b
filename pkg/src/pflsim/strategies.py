"""Personalisation strategies.

Each strategy answers two questions for a client: what update it submits in a
training round (:func:`local_step`) and which model it uses for evaluation
(:func:`personalize`). Strategy-private state lives in ``client.personal``.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .models import batch_order, loss_and_grad, num_steps, train_local
from .rng import derive_seed

KINDS = ("fedavg_ft", "fedprox_ft", "scaffold", "perfedavg_fo", "ditto", "fedrep", "fedala")


class StrategyStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "fedavg_ft"
    mu: float = 0.01
    meta_inner_lr: float = 0.05
    meta_outer_lr: float = 0.05
    ditto_lambda: float = 0.1
    fedrep_head_epochs: int = 1
    ala_lr: float = 1.0
    ala_steps: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")
        for name in ("mu", "meta_inner_lr", "meta_outer_lr", "ditto_lambda", "ala_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class LocalTraining:
    model: object  # MlpConfig
    epochs: int = 2
    lr: float = 0.05
    batch_size: int = 16


@dataclass
class UpdateRecord:
    client_id: int
    delta: np.ndarray
    weight: float
    aux: dict = None


def init_client(spec, client, num_params, model):
    """Create the strategy-private state a client needs before its first round."""
    st = {"kind": spec.kind}
    if spec.kind == "scaffold":
        st["c_i"] = np.zeros(num_params)
    elif spec.kind == "ditto":
        st["v"] = None
    elif spec.kind == "fedrep":
        st["head"] = None
    elif spec.kind == "fedala":
        hs = model.head_slice()
        st["blend"] = np.ones(hs.stop - hs.start)
        st["prev"] = None
    client.personal = st


def init_server(spec, num_params):
    return {"c": np.zeros(num_params)} if spec.kind == "scaffold" else {}


def _state(spec, client):
    st = client.personal
    if not st or st.get("kind") != spec.kind:
        raise StrategyStateError(f"client {client.id} has no {spec.kind} state; call init_client first")
    return st


def _sgd(w, data, lt, seed, **kw):
    return train_local(w, lt.model, data.X, data.y, lt.epochs, lt.lr, lt.batch_size, seed, **kw)


def _merge_masks(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a & b


def _perfedavg_fo(w, data, lt, alpha, beta, seed, grad_mask=None, epoch_hook=None):
    # batches are consumed in pairs (A: inner step, B: outer gradient);
    # a trailing unpaired batch serves as both.
    w = np.array(w, dtype=np.float64)
    if lt.epochs == 0 or beta == 0:
        return w
    n = len(data)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    sizes = lt.model.sizes
    for epoch in range(lt.epochs):
        order = batch_order(n, epoch, seed)
        batches = [order[s:s + lt.batch_size] for s in range(0, n, lt.batch_size)]
        for k in range(0, len(batches), 2):
            a = batches[k]
            b = batches[k + 1] if k + 1 < len(batches) else a
            if alpha != 0:
                _, ga = _kernels.loss_grad(w, sizes, data.X[a], data.y[a])
                tmp = w - alpha * ga
            else:
                tmp = w
            _, gb = _kernels.loss_grad(tmp, sizes, data.X[b], data.y[b])
            if grad_mask is not None:
                gb = np.where(grad_mask, gb, 0.0)
            w = w - beta * gb
        if epoch_hook is not None:
            w = epoch_hook(w)
    return w


def _ala_init(spec, st, global_params, data, lt):
    hs = lt.model.head_slice()
    prev = st["prev"]
    theta = np.array(global_params, dtype=np.float64)
    if prev is None:
        return theta
    g_head = global_params[hs]
    diff = g_head - prev[hs]
    w = st["blend"]
    for _ in range(spec.ala_steps):
        theta[hs] = prev[hs] + w * diff
        _, grad = loss_and_grad(theta, lt.model, data.X, data.y)
        w = np.clip(w - spec.ala_lr * grad[hs] * diff, 0.0, 1.0)
    st["blend"] = w
    theta[hs] = prev[hs] + w * diff
    return theta


def local_step(spec, global_params, client, data, lt, seed, server=None, grad_mask=None, epoch_hook=None):
    """Train ``client`` on ``data`` from the global model; return its update.

    ``grad_mask`` and ``epoch_hook`` apply to the training of the submitted
    model only (attack hooks for Neurotoxin and PGD).
    """
    st = _state(spec, client)
    g = np.asarray(global_params, dtype=np.float64)
    hooks = {"grad_mask": grad_mask, "epoch_hook": epoch_hook}
    aux = {}
    kind = spec.kind

    if kind == "fedavg_ft":
        w = _sgd(g, data, lt, seed, **hooks)
    elif kind == "fedprox_ft":
        w = _sgd(g, data, lt, seed, prox=(g, spec.mu), **hooks)
    elif kind == "scaffold":
        c = server["c"] if server and "c" in server else np.zeros_like(g)
        c_i = st["c_i"]
        corr = c - c_i
        w = _sgd(g, data, lt, seed, grad_hook=lambda grad: grad + corr, **hooks)
        k = num_steps(len(data), lt.epochs, lt.batch_size)
        if k > 0 and lt.lr > 0:
            new_ci = c_i - c + (g - w) / (k * lt.lr)
            aux["dc"] = new_ci - c_i
            st["c_i"] = new_ci
    elif kind == "perfedavg_fo":
        w = _perfedavg_fo(g, data, lt, spec.meta_inner_lr, spec.meta_outer_lr, seed, **hooks)
    elif kind == "ditto":
        w = _sgd(g, data, lt, seed, **hooks)
        v = g.copy() if st["v"] is None else st["v"]
        st["v"] = _sgd(v, data, lt, derive_seed(seed, "ditto"), prox=(g, spec.ditto_lambda))
    elif kind == "fedrep":
        hs = lt.model.head_slice()
        head_mask = np.zeros(g.shape[0], dtype=bool)
        head_mask[hs] = True
        w = g.copy()
        if st["head"] is not None:
            w[hs] = st["head"]
        w = train_local(w, lt.model, data.X, data.y, spec.fedrep_head_epochs, lt.lr, lt.batch_size,
                        derive_seed(seed, "head"), grad_mask=head_mask)
        st["head"] = w[hs].copy()
        w = _sgd(w, data, lt, seed, grad_mask=_merge_masks(~head_mask, grad_mask), epoch_hook=epoch_hook)
        w[hs] = g[hs]
    elif kind == "fedala":
        theta = _ala_init(spec, st, g, data, lt)
        w = _sgd(theta, data, lt, seed, **hooks)
        st["prev"] = w.copy()
    else:  # pragma: no cover - guarded by StrategyConfig
        raise ValueError(kind)

    delta = w - g
    if kind == "fedrep":
        delta[lt.model.head_slice()] = 0.0
    return UpdateRecord(client.id, delta, client.weight, aux)


def server_update(spec, server, updates, n_total):
    """Fold client-side bookkeeping into server state after aggregation."""
    if spec.kind == "scaffold":
        dcs = [u.aux["dc"] for u in updates if u.aux and "dc" in u.aux]
        if dcs:
            server["c"] = server["c"] + np.sum(dcs, axis=0) / n_total


def personalize(spec, global_params, client, lt, epochs, seed=None):
    """The model a client evaluates with after training ends."""
    st = _state(spec, client)
    data = client.train
    if len(data) == 0:
        raise ValueError(f"client {client.id} has no local data to personalise on")
    seed = derive_seed(client.seed, "personalize") if seed is None else seed
    g = np.asarray(global_params, dtype=np.float64)
    ft = LocalTraining(lt.model, epochs, lt.lr, lt.batch_size)
    kind = spec.kind
    if kind in ("fedavg_ft", "scaffold", "perfedavg_fo"):
        return _sgd(g, data, ft, seed)
    if kind == "fedprox_ft":
        return _sgd(g, data, ft, seed, prox=(g, spec.mu))
    if kind == "ditto":
        if st["v"] is not None:
            return st["v"].copy()
        return _sgd(g, data, ft, seed, prox=(g, spec.ditto_lambda))
    if kind == "fedrep":
        hs = lt.model.head_slice()
        w = g.copy()
        if st["head"] is not None:
            w[hs] = st["head"]
        mask = np.zeros(g.shape[0], dtype=bool)
        mask[hs] = True
        return _sgd(w, data, ft, seed, grad_mask=mask)
    if kind == "fedala":
        theta = _ala_init(spec, dict(st), g, data, lt)
        return _sgd(theta, data, ft, seed)
    raise ValueError(kind)  # pragma: no cover
