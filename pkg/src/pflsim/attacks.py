"""Backdoor attacks run by the adversary that controls the malicious clients.

PFedBA tunes the trigger against the current global model before each
poisoned round: once by loss alignment (the frozen model should already map
triggered inputs to the target), then every round by gradient alignment (the
backdoor gradient should look like the clean gradient of the same inputs).
The baselines keep the initial trigger fixed.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .autodiff import NumericError
from .data import Dataset, TriggerSpec, embed_trigger, poison_dataset
from .rng import derive_seed

KINDS = ("none", "sybil", "modelre", "pgd", "neurotoxin", "pfedba")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    first_round: int = 3
    target: int = 0
    mask: tuple = (0, 1, 2, 3, 4, 5, 6, 7)
    trigger_init: float = 0.5
    poison_rate: float = 0.25
    scale_factor: float = 20.0
    pgd_radius: float = -1.0  # negative -> self-calibrated each round
    neurotoxin_ratio: float = 0.01
    loss_align_steps: int = 50
    grad_align_steps: int = 20
    trigger_lr: float = 0.1
    grad_align_lr: float = 0.001
    fd_eps: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "mask", tuple(int(i) for i in self.mask))
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {KINDS}")
        if self.first_round < 1:
            raise ValueError("first_round must be >= 1")
        if self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")
        if not 0 <= self.neurotoxin_ratio < 1:
            raise ValueError("neurotoxin_ratio must lie in [0, 1)")
        if not 0 <= self.poison_rate <= 1:
            raise ValueError("poison_rate must lie in [0, 1]")
        if not 0 <= self.trigger_init <= 1:
            raise ValueError("trigger_init must lie in [0, 1]")
        if self.fd_eps <= 0 or self.trigger_lr < 0 or self.grad_align_lr < 0:
            raise ValueError("fd_eps must be positive and learning rates non-negative")
        if self.loss_align_steps < 0 or self.grad_align_steps < 0:
            raise ValueError("trigger step counts must be non-negative")

    def initial_trigger(self, dim):
        if any(i < 0 or i >= dim for i in self.mask):
            raise ValueError(f"mask index outside [0, {dim})")
        return TriggerSpec.from_indices(dim, self.mask, self.target, self.trigger_init)


# ---------------------------------------------------------------------------
# trigger objectives


def loss_align_objective(delta, trigger, params, model, pool):
    """Sum over the pool of L(E(x, delta), target) under frozen ``params``."""
    Xt = embed_trigger(pool.X, trigger.with_delta(delta))
    yt = np.full(len(pool), trigger.target)
    losses, gx = _kernels.input_grad(params, model.sizes, Xt, yt)
    return float(losses.sum()), gx.sum(axis=0) * trigger.mask


def grad_align_objective(delta, trigger, params, model, pool):
    """Sum over the pool of ||grad L(E(x, delta), target) - grad L(x, y)||_2."""
    return float(_grad_align_batch([delta], trigger, params, model, pool)[0])


def _grad_align_batch(deltas, trigger, params, model, pool):
    # one kernel call for several candidate deltas
    n = len(pool)
    m = trigger.mask
    Xt = np.vstack([pool.X * (1.0 - m) + d * m for d in deltas])
    yt = np.full(Xt.shape[0], trigger.target)
    Xc = np.tile(pool.X, (len(deltas), 1))
    yc = np.tile(pool.y, len(deltas))
    norms = _kernels.grad_diff_norms(params, model.sizes, Xt, yt, Xc, yc)
    vals = norms.reshape(len(deltas), n).sum(axis=1)
    if not np.all(np.isfinite(vals)):
        raise NumericError("gradient-alignment objective is not finite")
    return vals


def _descend(delta, mask, objective_and_grad, steps, lr, max_halvings=5):
    """Projected descent on [0, 1] with per-step backtracking.

    A step is accepted only if the objective does not increase; otherwise the
    step size is halved up to ``max_halvings`` times and, failing that, the
    iterate is kept.
    """
    delta = np.clip(np.array(delta, dtype=np.float64), 0.0, 1.0)
    free = mask > 0
    f, g = objective_and_grad(delta)
    history = [f]
    for _ in range(steps):
        g = np.where(free, g, 0.0)
        if not np.any(g):
            break
        step = lr
        for _ in range(max_halvings + 1):
            cand = np.where(free, np.clip(delta - step * g, 0.0, 1.0), delta)
            fc, gc = objective_and_grad(cand)
            if fc <= f:
                delta, f, g = cand, fc, gc
                break
            step *= 0.5
        history.append(f)
    return delta, history


def optimize_trigger_loss_align(trigger, params, model, pool, steps, lr):
    """Loss alignment: descend the summed backdoor loss w.r.t. masked delta."""
    if len(pool) == 0:
        raise ValueError("empty malicious dataset")
    delta, hist = _descend(trigger.delta, trigger.mask,
                           lambda d: loss_align_objective(d, trigger, params, model, pool), steps, lr)
    return trigger.with_delta(delta), hist


def optimize_trigger_grad_align(trigger, params, model, pool, steps, lr, fd_eps=1e-4):
    """Gradient alignment with central-difference derivatives on masked coordinates."""
    if len(pool) == 0:
        raise ValueError("empty malicious dataset")
    support = trigger.support

    def obj_grad(d):
        cands = [d]
        for i in support:
            for sign in (1.0, -1.0):
                e = d.copy()
                e[i] += sign * fd_eps
                cands.append(e)
        vals = _grad_align_batch(cands, trigger, params, model, pool)
        g = np.zeros_like(d)
        g[support] = (vals[1::2] - vals[2::2]) / (2.0 * fd_eps)
        return float(vals[0]), g

    delta, hist = _descend(trigger.delta, trigger.mask, obj_grad, steps, lr)
    return trigger.with_delta(delta), hist


# ---------------------------------------------------------------------------
# the adversary


def project_l2(w, center, radius):
    d = w - center
    n = float(np.linalg.norm(d))
    if n <= radius:
        return w
    if radius == 0:
        return center.copy()
    return center + d * (radius / n)


def neurotoxin_mask(prev_global_update, ratio):
    """True where poisoned SGD may write: everything except the top-``ratio``
    coordinates by magnitude of the last global update."""
    p = prev_global_update.shape[0]
    allowed = np.ones(p, dtype=bool)
    k = int(math.floor(ratio * p))
    if k > 0:
        top = np.argsort(-np.abs(prev_global_update), kind="stable")[:k]
        allowed[top] = False
    return allowed


class Adversary:
    """Coordinates every malicious client.

    It sees only what malicious clients legitimately receive (the broadcast
    global models) and its own clients' data.
    """

    def __init__(self, cfg, clients, model, dim):
        self.cfg = cfg
        self.model = model
        self.clients = {c.id: c for c in clients}
        self.trigger = cfg.initial_trigger(dim)
        self.initial = self.trigger
        pools = [c.pool for c in clients if c.pool is not None and len(c.pool)]
        if pools:
            pool = pools[0]
            for p in pools[1:]:
                pool = pool.concat(p)
        else:
            pool = Dataset(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), model.num_classes)
        self.pool = pool
        self.loss_aligned = False
        self.last_global = None
        self.prev_global_update = None
        self.trigger_log = []
        self.diagnostics = []

    @property
    def active(self):
        return self.cfg.kind != "none"

    def observe(self, global_params):
        """Record a broadcast global model (available to every client)."""
        if self.last_global is not None:
            self.prev_global_update = global_params - self.last_global
        self.last_global = np.array(global_params)

    def attacks_in(self, t):
        return self.active and t >= self.cfg.first_round

    def _tune_trigger(self, global_params, diag):
        cfg = self.cfg
        if len(self.pool) == 0:
            return
        before = self.trigger.delta.copy()
        if not self.loss_aligned:
            self.trigger, hist = optimize_trigger_loss_align(
                self.trigger, global_params, self.model, self.pool, cfg.loss_align_steps, cfg.trigger_lr)
            self.loss_aligned = True
            diag["loss_align"] = [hist[0], hist[-1]]
        if cfg.grad_align_steps > 0:
            self.trigger, hist = optimize_trigger_grad_align(
                self.trigger, global_params, self.model, self.pool, cfg.grad_align_steps,
                cfg.grad_align_lr, cfg.fd_eps)
            diag["grad_align"] = [hist[0], hist[-1]]
        diag["trigger_change"] = float(np.linalg.norm(self.trigger.delta - before))

    def round(self, t, global_params, selected, local_fn):
        """Updates for the selected malicious clients in round ``t``.

        ``local_fn(client, data, seed, grad_mask=None, epoch_hook=None)``
        runs the federation's strategy and returns an UpdateRecord.
        """
        cfg = self.cfg
        selected = [self.clients[i] for i in selected]
        diag = {"round": t, "clients": [c.id for c in selected]}
        if not selected:
            return [], diag
        if cfg.kind == "pfedba":
            self._tune_trigger(global_params, diag)
        self.trigger_log.append((t, self.trigger.delta[self.trigger.support].tolist()))

        grad_mask = None
        if cfg.kind == "neurotoxin" and self.prev_global_update is not None:
            grad_mask = neurotoxin_mask(self.prev_global_update, cfg.neurotoxin_ratio)

        radius = cfg.pgd_radius
        if cfg.kind == "pgd" and radius < 0:
            radius = self._calibrate_radius(t, global_params, selected, local_fn)
            diag["pgd_radius"] = radius
        epoch_hook = None
        if cfg.kind == "pgd":
            center = np.asarray(global_params)
            epoch_hook = lambda w: project_l2(w, center, radius)  # noqa: E731

        updates, raw, sent = [], [], []
        for c in selected:
            data = c.train
            if c.pool is not None and len(c.pool):
                data = poison_dataset(c.pool, self.trigger).concat(c.train)
            seed = derive_seed(c.seed, "round", t)
            u = local_fn(c, data, seed, grad_mask=grad_mask, epoch_hook=epoch_hook)
            if cfg.kind == "pgd":
                u.delta = project_l2(u.delta, np.zeros_like(u.delta), radius)
            raw.append(float(np.linalg.norm(u.delta)))
            if cfg.kind == "modelre":
                u.delta = u.delta * cfg.scale_factor
            sent.append(float(np.linalg.norm(u.delta)))
            updates.append(u)
        diag["local_distance"] = raw
        diag["update_norm"] = sent
        self.diagnostics.append(diag)
        return updates, diag

    def _calibrate_radius(self, t, global_params, selected, local_fn):
        # median norm of clean updates the malicious clients would send
        norms = []
        for c in selected:
            clean = c.train if c.pool is None else c.pool.concat(c.train)
            u = local_fn(c, clean, derive_seed(c.seed, "calibrate", t), dry_run=True)
            norms.append(float(np.linalg.norm(u.delta)))
        return float(np.median(norms))
