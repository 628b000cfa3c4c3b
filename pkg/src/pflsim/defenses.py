"""Robust aggregation on the server and trigger reverse-engineering on clients."""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .data import Dataset
from .models import predict, train_local
from .rng import derive_rng

KINDS = ("none", "multikrum", "trimmed_mean", "dnc", "flame")
CLIENT_KINDS = ("none", "nc")


class DefenseError(RuntimeError):
    pass


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "none"
    krum_assumed: int = 1
    krum_select: int = 0  # 0 -> n - krum_assumed
    trim_beta: int = 1
    dnc_filter_frac: float = 0.1
    dnc_subsample_dim: int = 2000
    dnc_iters: int = 1
    flame_noise: float = 0.001
    client: str = "none"
    nc_steps: int = 500
    nc_lr: float = 1.0
    nc_gamma: float = 0.01
    nc_unlearn_epochs: int = 1
    nc_threshold: float = 2.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown defense {self.kind!r}; expected one of {KINDS}")
        if self.client not in CLIENT_KINDS:
            raise ValueError(f"unknown client defense {self.client!r}; expected one of {CLIENT_KINDS}")
        if not 0 < self.dnc_filter_frac < 1:
            raise ValueError("dnc_filter_frac must lie in (0, 1)")
        if self.krum_assumed < 0 or self.krum_select < 0 or self.trim_beta < 0:
            raise ValueError("krum/trim counts must be non-negative")
        if self.dnc_subsample_dim < 1 or self.dnc_iters < 1:
            raise ValueError("dnc_subsample_dim and dnc_iters must be positive")


def _stack(updates):
    U = np.asarray(updates, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] == 0:
        raise DefenseError("need a non-empty list of equal-length update vectors")
    return U


def trimmed_mean(updates, beta):
    """Coordinate-wise mean after dropping the ``beta`` largest and smallest."""
    U = _stack(updates)
    n = U.shape[0]
    if n - 2 * beta < 1:
        raise DefenseError(f"cannot trim {beta} from each side of {n} updates")
    if beta == 0:
        return U.mean(axis=0)
    S = np.sort(U, axis=0, kind="stable")
    return S[beta:n - beta].mean(axis=0)


def krum_scores(updates, m_assumed):
    U = _stack(updates)
    n = U.shape[0]
    k = n - m_assumed - 2
    if k < 1:
        raise DefenseError(f"Krum needs n - m - 2 >= 1 (n={n}, m={m_assumed})")
    D = _kernels.pairwise_sq_dists(U)
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(D[i], i)
        scores[i] = np.sort(others)[:k].sum()
    return scores


def multi_krum(updates, m_assumed, k_select):
    """Mean of the ``k_select`` updates with the lowest Krum scores."""
    U = _stack(updates)
    n = U.shape[0]
    if not 1 <= k_select <= n:
        raise DefenseError(f"k_select={k_select} outside [1, {n}]")
    scores = krum_scores(U, m_assumed)
    chosen = np.sort(np.argsort(scores, kind="stable")[:k_select])
    return chosen.tolist(), U[chosen].mean(axis=0)


def top_direction(Xc, iters=100, tol=1e-9, seed=0):
    """Leading right-singular vector of ``Xc`` by power iteration."""
    d = Xc.shape[1]
    v = derive_rng(seed, "power").standard_normal(d)
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = Xc.T @ (Xc @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return np.zeros(d)
        w /= nw
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    return v


def _n_remove(frac, n):
    return min(n, int(math.ceil(frac * n - 1e-9)))


def dnc(updates, filter_frac, subsample_dim, n_iters, seed):
    """Spectral filtering on random coordinate subsets; returns (kept ids, mean)."""
    U = _stack(updates)
    n, d = U.shape
    if subsample_dim > d:
        raise DefenseError(f"subsample_dim={subsample_dim} exceeds update length {d}")
    n_rm = _n_remove(filter_frac, n)
    kept = set(range(n))
    for it in range(n_iters):
        if subsample_dim == d:
            cols = np.arange(d)
        else:
            cols = np.sort(derive_rng(seed, "dnc", it).choice(d, subsample_dim, replace=False))
        sub = U[:, cols]
        Xc = sub - sub.mean(axis=0)
        v = top_direction(Xc, seed=seed)
        scores = (Xc @ v) ** 2
        # highest score first; ties remove the highest id
        order = sorted(range(n), key=lambda i: (-scores[i], -i))
        kept &= set(range(n)) - set(order[:n_rm])
    if not kept:
        raise DefenseError("DnC removed every update")
    ids = sorted(kept)
    return ids, U[ids].mean(axis=0)


def _cosine_distances(U):
    norms = np.linalg.norm(U, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    V = U / safe[:, None]
    D = 1.0 - V @ V.T
    D[norms == 0, :] = 1.0
    D[:, norms == 0] = 1.0
    np.fill_diagonal(D, 0.0)
    return D


def largest_tight_group(D, threshold):
    """Largest index set whose pairwise distances are all <= threshold.

    Ties go to the lexicographically smallest set.
    """
    n = D.shape[0]
    ok = D <= threshold
    for size in range(n, 0, -1):
        for combo in itertools.combinations(range(n), size):
            if all(ok[i, j] for i, j in itertools.combinations(combo, 2)):
                return list(combo)
    return [0]


def flame_lite(updates, noise, seed):
    """Cosine grouping, median-norm clipping, averaging and Gaussian noise.

    Returns (aggregate, info) where info records kept ids, clip bound and sigma.
    """
    U = _stack(updates)
    n, d = U.shape
    if n < 2:
        raise DefenseError("FLAME needs at least two updates")
    norms = np.linalg.norm(U, axis=1)
    fallback = bool(np.all(norms == 0))
    if fallback:
        kept = list(range(n))
    else:
        D = _cosine_distances(U)
        iu = np.triu_indices(n, 1)
        kept = largest_tight_group(D, float(np.median(D[iu])))
    bound = float(np.median(norms[kept]))
    clipped = [U[i] * min(1.0, bound / norms[i]) if norms[i] > 0 else U[i] for i in kept]
    agg = np.mean(clipped, axis=0)
    sigma = noise * bound
    if sigma > 0:
        agg = agg + sigma * derive_rng(seed, "flame").standard_normal(d)
    return agg, {"kept": kept, "clip": bound, "sigma": sigma, "fallback": fallback}


def fedavg(updates, weights):
    U = _stack(updates)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[0] != U.shape[0] or np.any(w < 0) or w.sum() <= 0:
        raise DefenseError("weights must be non-negative with a positive sum")
    return (w / w.sum()) @ U


def aggregate(cfg, updates, weights, seed):
    """Apply the configured server defense; returns (aggregate, decision dict)."""
    n = len(updates)
    if cfg.kind == "none":
        return fedavg(updates, weights), {"accepted": list(range(n))}
    if cfg.kind == "multikrum":
        k = cfg.krum_select or n - cfg.krum_assumed
        ids, agg = multi_krum(updates, cfg.krum_assumed, k)
        return agg, {"accepted": ids}
    if cfg.kind == "trimmed_mean":
        return trimmed_mean(updates, cfg.trim_beta), {"accepted": list(range(n)), "trimmed": cfg.trim_beta}
    if cfg.kind == "dnc":
        d = len(updates[0])
        ids, agg = dnc(updates, cfg.dnc_filter_frac, min(cfg.dnc_subsample_dim, d), cfg.dnc_iters, seed)
        return agg, {"accepted": ids}
    if cfg.kind == "flame":
        agg, info = flame_lite(updates, cfg.flame_noise, seed)
        return agg, {"accepted": info["kept"], "clip": info["clip"], "sigma": info["sigma"],
                     "fallback": info["fallback"]}
    raise ValueError(cfg.kind)  # pragma: no cover


# ---------------------------------------------------------------------------
# client side: Neural-Cleanse style reverse engineering


def reverse_trigger(params, model, data, target, steps, lr, gamma):
    """Soft mask and pattern that push ``data`` to ``target`` with a small mask."""
    d = data.dim
    mask = np.full(d, 0.5)
    pattern = np.full(d, 0.5)
    y = np.full(len(data), target)
    n = len(data)
    for _ in range(steps):
        X = data.X * (1.0 - mask) + pattern * mask
        _, gx = _kernels.input_grad(params, model.sizes, X, y)
        gx /= n
        g_mask = (gx * (pattern - data.X)).sum(axis=0) + gamma
        g_pat = gx.sum(axis=0) * mask
        mask = np.clip(mask - lr * g_mask, 0.0, 1.0)
        pattern = np.clip(pattern - lr * g_pat, 0.0, 1.0)
    return mask, pattern


def anomaly_indices(norms):
    norms = np.asarray(norms, dtype=np.float64)
    med = np.median(norms)
    mad = np.median(np.abs(norms - med))
    if mad == 0:
        return np.zeros_like(norms)
    return np.abs(norms - med) / (1.4826 * mad)


@dataclass
class CleanseResult:
    masks: list
    patterns: list
    indices: np.ndarray
    flagged: list
    patched: np.ndarray


def nc_lite(params, model, clean, steps, unlearn_epochs, lr=0.1, gamma=0.01, threshold=2.0,
            train_lr=0.05, batch_size=16, seed=0):
    """Reverse a trigger per class, flag outliers, unlearn flagged triggers."""
    if np.unique(clean.y).size < 2:
        raise ValueError("clean data must span at least two classes")
    masks, patterns = [], []
    for c in range(model.num_classes):
        m, p = reverse_trigger(params, model, clean, c, steps, lr, gamma)
        masks.append(m)
        patterns.append(p)
    idx = anomaly_indices([m.sum() for m in masks])
    flagged = [c for c in range(model.num_classes) if idx[c] > threshold]
    patched = np.array(params, dtype=np.float64)
    if flagged and unlearn_epochs > 0:
        X, y = [clean.X], [clean.y]
        for c in flagged:
            keep = clean.y != c
            X.append(clean.X[keep] * (1.0 - masks[c]) + patterns[c] * masks[c])
            y.append(clean.y[keep])
        aug = Dataset(np.vstack(X), np.concatenate(y), clean.num_classes)
        patched = train_local(patched, model, aug.X, aug.y, unlearn_epochs, train_lr, batch_size, seed)
    return CleanseResult(masks, patterns, idx, flagged, patched)


def reversed_asr(params, model, data, mask, pattern, target):
    keep = data.y != target
    if not np.any(keep):
        return 0.0
    X = data.X[keep] * (1.0 - mask) + pattern * mask
    return float(np.mean(predict(params, model, X) == target))
