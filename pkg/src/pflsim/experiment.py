"""Run one experiment end to end and evaluate ACC / ASR."""

import csv
import io
import json
import math
import time

import numpy as np

from . import config as config_mod
from . import fl
from .attacks import Adversary
from .data import embed_trigger, gen_synthetic, load_table, dirichlet_partition, split_pool, stratified_split
from .defenses import nc_lite
from .models import MlpConfig, init_model, predict
from .rng import derive_rng, derive_seed
from .strategies import LocalTraining, personalize


class EvaluationError(ValueError):
    pass


def eval_acc(models, model_cfg, test_sets):
    """Clean accuracy of each model on its own test set."""
    out = []
    for params, data in zip(models, test_sets):
        if len(data) == 0:
            raise EvaluationError("empty test set")
        out.append(float(np.mean(predict(params, model_cfg, data.X) == data.y)))
    return out


def eval_asr(models, model_cfg, trigger, test_sets):
    """Fraction of triggered non-target test inputs classified as the target."""
    out = []
    for params, data in zip(models, test_sets):
        keep = data.y != trigger.target
        if not np.any(keep):
            raise EvaluationError("no test examples outside the target class")
        X = embed_trigger(data.X[keep], trigger)
        out.append(float(np.mean(predict(params, model_cfg, X) == trigger.target)))
    return out


def distance_table(history):
    """Per attack round: mean norm of sent malicious updates and of the raw
    local-model displacement ||w_i - w_prev|| before any scaling."""
    rows = []
    for rec in history:
        diag = rec.attack if isinstance(rec, fl.RoundRecord) else rec.get("attack")
        if not diag or not diag.get("update_norm"):
            continue
        rows.append({
            "round": diag["round"],
            "mean_update_norm": float(np.mean(diag["update_norm"])),
            "mean_local_distance": float(np.mean(diag["local_distance"])),
        })
    return rows


def _mean(values):
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def build_dataset(cfg):
    if cfg.data.source == "synthetic":
        d = cfg.data
        return gen_synthetic(d.num_classes, d.dim, d.n_per_class, d.spread, cfg.federation.seed), None
    data, info = load_table(cfg.data.path, cfg.data.label_column)
    return data, info


def build_federation(cfg, data):
    fed_cfg = cfg.federation
    seed = fed_cfg.seed
    model = MlpConfig(data.dim, cfg.model.hidden_dims, data.num_classes)
    parts = dirichlet_partition(data, fed_cfg.n_clients, fed_cfg.alpha, seed)
    n_mal = int(math.floor(fed_cfg.malicious_fraction * fed_cfg.n_clients + 0.5))
    attacked = cfg.attack.kind != "none"
    mal_ids = set()
    if attacked and n_mal:
        mal_ids = set(derive_rng(seed, "malicious").choice(fed_cfg.n_clients, n_mal, replace=False).tolist())
    clients = []
    for i, part in enumerate(parts):
        cseed = derive_seed(seed, "client", i)
        train, test = stratified_split(part, cfg.eval.test_fraction, cseed)
        pool = None
        if i in mal_ids:
            pool, train = split_pool(train, cfg.attack.poison_rate, cseed)
        weight = float(len(train) + (len(pool) if pool is not None else 0))
        clients.append(fl.ClientState(i, i in mal_ids, train, test, pool, weight, cseed))
    local = LocalTraining(model, fed_cfg.local_epochs, fed_cfg.lr, fed_cfg.batch_size)
    adversary = None
    if attacked:
        adversary = Adversary(cfg.attack, [c for c in clients if c.malicious], model, data.dim)
    fed = fl.Federation(clients, local, cfg.strategy, cfg.defense, fed_cfg.n_select, fed_cfg.rounds, seed,
                        adversary)
    return model, fed


def run_experiment(cfg):
    """Data -> partition -> training -> personalisation -> evaluation."""
    start = time.perf_counter()
    data, table_info = build_dataset(cfg)
    model, fed = build_federation(cfg, data)
    init = init_model(model, derive_seed(cfg.federation.seed, "model"))
    final, clients, history = fl.run_training(init, fed)

    trigger = fed.adversary.trigger if fed.adversary else cfg.attack.initial_trigger(data.dim)
    benign = [c for c in clients if not c.malicious]
    personal = [personalize(cfg.strategy, final, c, fed.local, cfg.eval.personalize_epochs) for c in benign]
    before_nc = None
    nc_info = None
    if cfg.defense.client == "nc":
        before_nc = _score(personal, model, trigger, benign)
        nc_info, patched = [], []
        for c, p in zip(benign, personal):
            if np.unique(c.train.y).size < 2:
                # NC needs two classes to contrast; leave the model as is
                patched.append(p)
                nc_info.append({"client": c.id, "skipped": "single-class data"})
                continue
            res = nc_lite(p, model, c.train, cfg.defense.nc_steps, cfg.defense.nc_unlearn_epochs,
                          lr=cfg.defense.nc_lr, gamma=cfg.defense.nc_gamma, threshold=cfg.defense.nc_threshold,
                          train_lr=fed.local.lr, batch_size=fed.local.batch_size,
                          seed=derive_seed(c.seed, "nc"))
            patched.append(res.patched)
            nc_info.append({"client": c.id, "flagged": res.flagged,
                            "anomaly_index": [float(v) for v in res.indices]})
        personal = patched

    acc, asr = _score(personal, model, trigger, benign)
    g_acc, g_asr = _score([final] * len(benign), model, trigger, benign)

    report = {
        "config": config_mod.dumps(cfg),
        "config_hash": cfg.hash(),
        "clients": [{"id": c.id, "acc": a, "asr": s} for c, a, s in zip(benign, acc, asr)],
        "mean_acc": _mean(acc),
        "mean_asr": _mean(asr),
        "global_acc": _mean(g_acc),
        "global_asr": _mean(g_asr),
        "malicious_clients": sorted(c.id for c in clients if c.malicious),
        "trigger": {
            "target": int(trigger.target),
            "features": [[i, v] for i, v in trigger.as_pairs()],
        },
        "history": [rec.as_dict() for rec in history],
        "distance_table": distance_table(history),
        "final_checksum": fl.checksum(final),
    }
    if fed.adversary is not None:
        report["trigger_log"] = fed.adversary.trigger_log
    if before_nc is not None:
        report["before_client_defense"] = {"mean_acc": _mean(before_nc[0]), "mean_asr": _mean(before_nc[1])}
        report["client_defense"] = nc_info
    if table_info is not None:
        report["table"] = {"columns": table_info.columns, "label_column": table_info.label_column,
                           "mins": table_info.mins, "maxs": table_info.maxs, "classes": table_info.classes}
    report["wall_time"] = time.perf_counter() - start
    return report


def _score(models, model, trigger, clients):
    acc, asr = [], []
    for p, c in zip(models, clients):
        try:
            acc.append(eval_acc([p], model, [c.test])[0])
        except EvaluationError:
            acc.append(None)
        try:
            asr.append(eval_asr([p], model, trigger, [c.test])[0])
        except EvaluationError:
            asr.append(None)
    return acc, asr


CSV_COLUMNS = ["config_hash", "strategy", "attack", "defense", "client_id", "acc", "asr"]


def _fmt(v):
    return "" if v is None else repr(float(v))


def metrics_csv(report, cfg):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    base = [report["config_hash"], cfg.strategy.kind, cfg.attack.kind, cfg.defense.kind]
    for row in report["clients"]:
        w.writerow(base + [row["id"], _fmt(row["acc"]), _fmt(row["asr"])])
    w.writerow(base + ["mean", _fmt(report["mean_acc"]), _fmt(report["mean_asr"])])
    return buf.getvalue()


def trigger_text(report):
    lines = [f"# target: {report['trigger']['target']}", "Feature ID: Value"]
    lines += [f"{i}: {v:.6f}" for i, v in report["trigger"]["features"]]
    return "\n".join(lines) + "\n"


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def write_outputs(report, cfg, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report_json(report))
    (out_dir / "metrics.csv").write_text(metrics_csv(report, cfg))
    (out_dir / "trigger.txt").write_text(trigger_text(report))
