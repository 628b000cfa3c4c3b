import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from pflsim import fl
from pflsim.attacks import AttackConfig
from pflsim.config import ExperimentConfig
from pflsim.data import Dataset, gen_synthetic, split_poison, stratified_split
from pflsim.defenses import (DefenseConfig, DefenseError, aggregate, anomaly_indices, dnc, flame_lite,
                             krum_scores, multi_krum, nc_lite, trimmed_mean)
from pflsim.experiment import build_dataset, build_federation, eval_asr
from pflsim.models import MlpConfig, init_model, train_local
from pflsim.rng import derive_seed


def vecs(rows):
    return [np.asarray(r, dtype=float) for r in rows]


# trimmed mean

def test_trimmed_mean_examples():
    assert trimmed_mean(vecs([[1], [2], [3], [4], [5]]), 1).tolist() == [3.0]
    assert trimmed_mean(vecs([[2], [2], [2], [9]]), 1).tolist() == [2.0]
    with pytest.raises(DefenseError):
        trimmed_mean(vecs([[1], [2]]), 1)


@pytest.mark.property
@settings(max_examples=200, deadline=None)
@given(st.integers(1, 9), st.integers(1, 5), st.integers(0, 2**31))
def test_trimmed_mean_matches_brute_force(n, d, seed):
    U = np.random.default_rng(seed).integers(-5, 6, (n, d)).astype(float)
    beta = int(np.random.default_rng(seed + 1).integers(0, (n - 1) // 2 + 1))
    ref = [np.mean(sorted(U[:, j])[beta:n - beta]) for j in range(d)]
    assert np.allclose(trimmed_mean(list(U), beta), ref, atol=1e-12)
    assert np.array_equal(trimmed_mean(list(U), 0), U.mean(axis=0))


# Multi-Krum

def brute_krum(U, m, k):
    n = len(U)
    scores = []
    for i in range(n):
        d = sorted(float(((U[i] - U[j]) ** 2).sum()) for j in range(n) if j != i)
        scores.append(sum(d[:n - m - 2]))
    ids = sorted(sorted(range(n), key=lambda i: (scores[i], i))[:k])
    return scores, ids


def test_krum_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(4, 9))
        m = int(rng.integers(0, n - 2))
        k = int(rng.integers(1, n + 1))
        U = rng.integers(-4, 5, (n, 3)).astype(float)
        scores, ids = brute_krum(U, m, k)
        assert np.allclose(krum_scores(list(U), m), scores)
        got_ids, agg = multi_krum(list(U), m, k)
        assert got_ids == ids and np.allclose(agg, U[ids].mean(axis=0))


def test_krum_excludes_outlier():
    ids, agg = multi_krum(vecs([[0, 0], [0, 0], [0, 0], [100, 100]]), 1, 2)
    assert 3 not in ids and agg.tolist() == [0.0, 0.0]


def test_krum_select_all_is_mean():
    U = vecs([[1, 0], [0, 3], [5, 5], [2, -1]])
    ids, agg = multi_krum(U, 1, 4)
    assert ids == [0, 1, 2, 3] and np.allclose(agg, np.mean(U, axis=0))


def test_krum_identical_updates():
    _, agg = multi_krum(vecs([[1.5, -2]] * 5), 1, 3)
    assert agg.tolist() == [1.5, -2.0]


def test_krum_infeasible_sizes():
    with pytest.raises(DefenseError):
        multi_krum(vecs([[0], [1], [2]]), 1, 1)
    with pytest.raises(DefenseError):
        multi_krum(vecs([[0], [1], [2], [3]]), 1, 5)


@pytest.mark.property
@settings(max_examples=200, deadline=None)
@given(st.integers(4, 8), st.integers(0, 2**31))
def test_krum_permutation_equivariant(n, seed):
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    # ties at the cut are broken by id, which is not permutation-invariant
    s = np.sort(krum_scores(list(U), 1))
    assume(s[n - 1] - s[n - 2] > 1e-9 * max(1.0, s[n - 1]))
    ids, agg = multi_krum(list(U), 1, n - 1)
    pids, pagg = multi_krum(list(U[perm]), 1, n - 1)
    assert sorted(perm[pids].tolist()) == ids
    assert np.allclose(agg, pagg, atol=1e-12)


# DnC

def test_dnc_matches_dense_spectral_filter():
    rng = np.random.default_rng(1)
    for _ in range(20):
        U = rng.normal(size=(6, 3))
        Xc = U - U.mean(axis=0)
        _, vecs_ = np.linalg.eigh(Xc.T @ Xc)
        scores = (Xc @ vecs_[:, -1]) ** 2
        drop = int(np.argmax(scores))
        ids, agg = dnc(list(U), 1 / 6, 3, 1, 0)
        assert ids == [i for i in range(6) if i != drop]
        assert np.allclose(agg, U[ids].mean(axis=0))


def test_dnc_removes_far_outlier():
    rng = np.random.default_rng(2)
    U = list(rng.normal(size=(5, 4)) * 0.1) + [np.full(4, 50.0)]
    ids, _ = dnc(U, 1 / 6, 4, 1, 0)
    assert ids == [0, 1, 2, 3, 4]


def test_dnc_identical_updates_drop_highest_id():
    ids, agg = dnc(vecs([[1, 2]] * 5), 0.2, 2, 1, 0)
    assert ids == [0, 1, 2, 3] and agg.tolist() == [1.0, 2.0]


def test_dnc_errors():
    with pytest.raises(DefenseError):
        dnc(vecs([[1, 2]] * 3), 0.5, 3, 1, 0)
    with pytest.raises(DefenseError):
        dnc(vecs([[0.0], [1.0]]), 0.9, 1, 1, 0)


# FLAME-lite

def test_flame_identical_updates_zero_noise():
    agg, info = flame_lite(vecs([[0.5, -1, 2]] * 4), 0.0, 0)
    assert agg.tolist() == [0.5, -1.0, 2.0] and info["sigma"] == 0.0


def test_flame_clips_large_update():
    U = vecs([[1, 0], [1, 0.1], [1, -0.1], [10, 0]])
    agg, info = flame_lite(U, 0.0, 0)
    assert 3 in info["kept"]
    norms = np.linalg.norm(U, axis=1)
    bound = np.median(norms[info["kept"]])
    clipped = [U[i] * min(1, bound / norms[i]) for i in info["kept"]]
    assert np.allclose(agg, np.mean(clipped, axis=0))
    assert np.linalg.norm(agg) <= bound + 1e-12


def test_flame_all_zero_falls_back():
    agg, info = flame_lite(vecs([[0, 0]] * 3), 0.001, 0)
    assert info["fallback"] and info["kept"] == [0, 1, 2] and agg.tolist() == [0.0, 0.0]


def test_flame_needs_two_updates():
    with pytest.raises(DefenseError):
        flame_lite(vecs([[1.0]]), 0.0, 0)


@pytest.mark.property
@settings(max_examples=200, deadline=None)
@given(st.integers(2, 7), st.integers(1, 30), st.integers(0, 2**31))
def test_flame_seeded_and_noise_bounded(n, d, seed):
    U = list(np.random.default_rng(seed).normal(size=(n, d)))
    a, info = flame_lite(U, 0.01, seed)
    b, _ = flame_lite(U, 0.01, seed)
    assert np.array_equal(a, b)
    clean, _ = flame_lite(U, 0.0, seed)
    assert np.linalg.norm(a - clean) <= info["sigma"] * np.sqrt(d) * 6


# dispatch

@pytest.mark.parametrize("kind", ["none", "multikrum", "trimmed_mean", "dnc", "flame"])
def test_aggregate_deterministic(kind):
    U = list(np.random.default_rng(3).normal(size=(6, 5)))
    cfg = DefenseConfig(kind)
    a, da = aggregate(cfg, U, [1.0] * 6, 7)
    b, db = aggregate(cfg, U, [1.0] * 6, 7)
    assert np.array_equal(a, b) and da == db


def test_defense_config_validation():
    with pytest.raises(ValueError):
        DefenseConfig("fltrust")
    with pytest.raises(ValueError):
        DefenseConfig(client="nad")


# Neural-Cleanse-lite

MODEL = MlpConfig(6, (8,), 3)


def test_anomaly_index_zero_mad():
    assert anomaly_indices([2.0, 2.0, 2.0, 5.0]).tolist() == [0, 0, 0, 0]
    assert np.allclose(anomaly_indices([1.0, 2.0, 3.0]), [1 / 1.4826, 0, 1 / 1.4826])


def test_nc_zero_unlearn_epochs_keeps_model():
    data = gen_synthetic(3, 6, 10, 0.1, 0)
    p = init_model(MODEL, 0)
    res = nc_lite(p, MODEL, data, 20, 0)
    assert np.array_equal(res.patched, p)
    assert len(res.masks) == 3 and all(np.all((m >= 0) & (m <= 1)) for m in res.masks)


def test_nc_needs_two_classes():
    data = Dataset(np.full((4, 6), 0.5), [1, 1, 1, 1], 3)
    with pytest.raises(ValueError):
        nc_lite(init_model(MODEL, 0), MODEL, data, 5, 1)


@pytest.mark.slow
@pytest.mark.xfail(reason="one of ten clean toy models gets a class flagged; four classes make MAD fragile",
                   strict=True)
def test_nc_clean_global_models_unflagged():
    clean_runs = 0
    for seed in range(10):
        cfg = ExperimentConfig().with_overrides({"federation.seed": str(seed)})
        data, _ = build_dataset(cfg)
        model, fed = build_federation(cfg, data)
        final, _, _ = fl.run_training(init_model(model, derive_seed(seed, "model")), fed)
        _, held = stratified_split(data, 0.2, 7)
        d = cfg.defense
        clean_runs += not nc_lite(final, model, held, d.nc_steps, 1, lr=d.nc_lr, gamma=d.nc_gamma).flagged
    assert clean_runs == 10


@pytest.mark.slow
def test_nc_flags_and_removes_fixed_patch_trigger():
    # centrally trained model with the fixed patch baked in
    model = MlpConfig(16, (32, 32), 4)
    trigger = AttackConfig("sybil").initial_trigger(16)
    caught = 0
    for seed in range(10):
        train, test = stratified_split(gen_synthetic(4, 16, 250, 0.12, seed), 0.2, seed)
        mal, nor = split_poison(train, 0.1, trigger, seed)
        mix = mal.concat(nor)
        w = train_local(init_model(model, seed), model, mix.X, mix.y, 10, 0.05, 16, seed)
        assert eval_asr([w], model, trigger, [test])[0] > 0.9
        res = nc_lite(w, model, nor, 500, 1, lr=1.0)
        if trigger.target in res.flagged:
            assert eval_asr([res.patched], model, trigger, [test])[0] < 0.3
            caught += 1
    assert caught >= 5
