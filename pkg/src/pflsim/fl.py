"""Federated round engine: sampling, local updates, defense, aggregation."""

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import defenses, strategies
from .rng import derive_rng, derive_seed
from .strategies import UpdateRecord


@dataclass
class ClientState:
    id: int
    malicious: bool
    train: object  # Dataset; for malicious clients the clean remainder D_nor
    test: object = None
    pool: object = None  # malicious only: clean originals that get triggered
    weight: float = 1.0
    seed: int = 0
    personal: dict = field(default_factory=dict)

    @property
    def role(self):
        return "malicious" if self.malicious else "benign"


@dataclass
class RoundRecord:
    round: int
    selected: list
    malicious: list
    norms: dict
    decision: dict
    checksum: str
    attack: dict = None

    def as_dict(self):
        return {
            "round": self.round,
            "selected": self.selected,
            "malicious": self.malicious,
            "norms": {str(k): v for k, v in self.norms.items()},
            "decision": self.decision,
            "checksum": self.checksum,
            "attack": self.attack,
        }


@dataclass
class Federation:
    """Everything a training run needs apart from the initial model."""

    clients: list
    local: object  # strategies.LocalTraining
    strategy: object  # strategies.StrategyConfig
    defense: object  # defenses.DefenseConfig
    n_select: int
    rounds: int
    seed: int
    adversary: object = None
    server: dict = field(default_factory=dict)


def checksum(params):
    return hashlib.sha256(np.ascontiguousarray(params, dtype=np.float64).tobytes()).hexdigest()[:16]


def sample_clients(n_total, n_select, round, seed):
    """Uniform sample without replacement, keyed by (seed, round); sorted ids."""
    if not 0 <= n_select <= n_total:
        raise ValueError(f"cannot select {n_select} of {n_total} clients")
    return sorted(derive_rng(seed, "sample", round).choice(n_total, n_select, replace=False).tolist())


def fedavg_aggregate(updates):
    if not updates:
        raise ValueError("no updates to aggregate")
    length = updates[0].delta.shape[0]
    if any(u.delta.shape[0] != length for u in updates):
        raise ValueError("update lengths differ")
    return defenses.fedavg([u.delta for u in updates], [u.weight for u in updates])


def _local_fn(fed, global_params):
    def run(client, data, seed, grad_mask=None, epoch_hook=None, dry_run=False):
        target = client
        if dry_run:
            target = copy.copy(client)
            target.personal = copy.deepcopy(client.personal)
        return strategies.local_step(fed.strategy, global_params, target, data, fed.local, seed,
                                     fed.server, grad_mask=grad_mask, epoch_hook=epoch_hook)
    return run


def run_round(global_params, fed, t):
    """One round; returns (new global params, RoundRecord)."""
    if t < 1:
        raise ValueError("rounds are numbered from 1")
    by_id = {c.id: c for c in fed.clients}
    selected = sample_clients(len(fed.clients), fed.n_select, t, fed.seed)
    adv = fed.adversary
    if adv is not None:
        adv.observe(global_params)
    local = _local_fn(fed, global_params)

    attacking = adv is not None and adv.attacks_in(t)
    mal_ids = [i for i in selected if by_id[i].malicious]
    updates = {}
    for i in selected:
        c = by_id[i]
        if attacking and c.malicious:
            continue
        data = c.train if c.pool is None else c.pool.concat(c.train)
        updates[i] = local(c, data, derive_seed(c.seed, "round", t))
    attack_diag = None
    if attacking and mal_ids:
        mal_updates, attack_diag = adv.round(t, global_params, mal_ids, local)
        for u in mal_updates:
            updates[u.client_id] = u

    ordered = [updates[i] for i in selected]
    agg, decision = defenses.aggregate(fed.defense, [u.delta for u in ordered], [u.weight for u in ordered],
                                       derive_seed(fed.seed, "defense", t))
    decision = dict(decision)
    decision["accepted"] = [selected[j] for j in decision["accepted"]]
    decision["rejected"] = [i for i in selected if i not in decision["accepted"]]
    new_global = global_params + agg
    strategies.server_update(fed.strategy, fed.server, ordered, len(fed.clients))
    rec = RoundRecord(
        round=t,
        selected=selected,
        malicious=mal_ids if attacking else [],
        norms={u.client_id: float(np.linalg.norm(u.delta)) for u in ordered},
        decision=decision,
        checksum=checksum(new_global),
        attack=attack_diag,
    )
    return new_global, rec


def run_training(init_params, fed):
    """``fed.rounds`` rounds from ``init_params``; returns (global, clients, history)."""
    num_params = init_params.shape[0]
    fed.server.update(strategies.init_server(fed.strategy, num_params))
    for c in fed.clients:
        if not c.personal:
            strategies.init_client(fed.strategy, c, num_params, fed.local.model)
    g = np.array(init_params, dtype=np.float64)
    history = []
    for t in range(1, fed.rounds + 1):
        g, rec = run_round(g, fed, t)
        history.append(rec)
    return g, fed.clients, history
