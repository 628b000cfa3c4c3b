import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pflsim import fl
from pflsim.data import dirichlet_partition, gen_synthetic
from pflsim.defenses import DefenseConfig
from pflsim.models import MlpConfig, init_model, loss_and_grad, train_local
from pflsim.strategies import (KINDS, LocalTraining, StrategyConfig, StrategyStateError, init_client,
                               init_server, local_step, personalize, server_update)

MODEL = MlpConfig(4, (6,), 3)


def make_client(seed=0, n=24, cid=0):
    data = gen_synthetic(3, 4, n // 3, 0.2, seed)
    return fl.ClientState(cid, False, data, None, None, float(n), seed)


def setup(kind, seed=0, **kw):
    spec = StrategyConfig(kind, **kw)
    c = make_client(seed)
    init_client(spec, c, MODEL.num_params, MODEL)
    return spec, c, init_model(MODEL, seed)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        StrategyConfig("pfedme")


@pytest.mark.parametrize("kind", KINDS)
def test_uninitialised_state_errors(kind):
    spec = StrategyConfig(kind)
    c = make_client()
    with pytest.raises(StrategyStateError):
        local_step(spec, init_model(MODEL, 0), c, c.train, LocalTraining(MODEL), 0)


@pytest.mark.parametrize("kind", KINDS)
def test_update_shape_and_determinism(kind):
    outs = []
    for _ in range(2):
        spec, c, g = setup(kind)
        server = init_server(spec, g.size)
        lt = LocalTraining(MODEL, 2, 0.05, 8)
        u1 = local_step(spec, g, c, c.train, lt, 3, server)
        u2 = local_step(spec, g + u1.delta, c, c.train, lt, 4, server)
        p = personalize(spec, g + u2.delta, c, lt, 1)
        outs.append((u1.delta.tobytes(), u2.delta.tobytes(), p.tobytes()))
        assert u1.delta.shape == g.shape and p.shape == g.shape
    assert outs[0] == outs[1]


def test_fedavg_zero_epochs_zero_update():
    spec, c, g = setup("fedavg_ft")
    u = local_step(spec, g, c, c.train, LocalTraining(MODEL, 0), 0)
    assert np.array_equal(u.delta, np.zeros_like(g))


@pytest.mark.property
@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 2), st.integers(2, 12))
def test_fedprox_mu_zero_equals_fedavg(seed, epochs, bs):
    _, c, g = setup("fedavg_ft", seed % 1000)
    lt = LocalTraining(MODEL, epochs, 0.05, bs)
    a = local_step(StrategyConfig("fedavg_ft"), g, c, c.train, lt, seed)
    init_client(StrategyConfig("fedprox_ft", mu=0.0), c, MODEL.num_params, MODEL)
    b = local_step(StrategyConfig("fedprox_ft", mu=0.0), g, c, c.train, lt, seed)
    assert a.delta.tobytes() == b.delta.tobytes()


@pytest.mark.property
@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 2))
def test_fedrep_head_update_is_zero(seed, epochs):
    spec, c, g = setup("fedrep", seed % 1000)
    u = local_step(spec, g, c, c.train, LocalTraining(MODEL, epochs, 0.1, 8), seed)
    assert np.all(u.delta[MODEL.head_slice()] == 0.0)
    assert np.any(u.delta != 0.0)


def test_scaffold_zero_variates_one_step_equals_fedavg():
    spec, c, g = setup("scaffold")
    lt = LocalTraining(MODEL, 1, 0.05, 64)  # one batch, one step
    a = local_step(spec, g, c, c.train, lt, 5, init_server(spec, g.size))
    b = local_step(StrategyConfig("fedavg_ft"), g, _fresh("fedavg_ft", c), c.train, lt, 5)
    assert np.array_equal(a.delta, b.delta)


def _fresh(kind, c):
    init_client(StrategyConfig(kind), c, MODEL.num_params, MODEL)
    return c


def test_scaffold_variates_option_two():
    spec, c, g = setup("scaffold")
    server = init_server(spec, g.size)
    lt = LocalTraining(MODEL, 1, 0.05, 8)
    u = local_step(spec, g, c, c.train, lt, 5, server)
    k = 3  # 24 examples, batch 8
    assert np.allclose(c.personal["c_i"], -u.delta / (k * lt.lr))
    server_update(spec, server, [u], n_total=4)
    assert np.allclose(server["c"], u.aux["dc"] / 4)


def test_perfedavg_alpha_zero_is_one_batch_sgd():
    spec, c, g = setup("perfedavg_fo", meta_inner_lr=0.0, meta_outer_lr=0.05)
    lt = LocalTraining(MODEL, 1, 0.05, 64)
    a = local_step(spec, g, c, c.train, lt, 2)
    b = local_step(StrategyConfig("fedavg_ft"), g, _fresh("fedavg_ft", c), c.train, lt, 2)
    assert a.delta.tobytes() == b.delta.tobytes()


def test_perfedavg_first_order_hand_update():
    spec, c, g = setup("perfedavg_fo", meta_inner_lr=0.1, meta_outer_lr=0.2)
    lt = LocalTraining(MODEL, 1, 0.05, 64)
    X, y = c.train.X, c.train.y
    _, ga = loss_and_grad(g, MODEL, X, y)
    _, gb = loss_and_grad(g - 0.1 * ga, MODEL, X, y)
    u = local_step(spec, g, c, c.train, lt, 2)
    assert np.allclose(u.delta, -0.2 * gb, atol=1e-15)


def test_ditto_prox_step_exact():
    rng = np.random.default_rng(0)
    c = make_client()
    v = init_model(MODEL, 1)
    g = v + rng.normal(size=v.size) * 0.1
    X, y = c.train.X, c.train.y
    lam, lr = 0.3, 0.05
    _, grad = loss_and_grad(v, MODEL, X, y)
    step = train_local(v, MODEL, X, y, 1, lr, len(y), 0, prox=(g, lam))
    assert np.allclose(step - v, -lr * (grad + lam * (v - g)), atol=1e-15)


def test_ditto_large_lambda_moves_toward_global():
    spec, c, g = setup("ditto", ditto_lambda=1e6)
    v = init_model(MODEL, 99)
    c.personal["v"] = v.copy()
    lt = LocalTraining(MODEL, 1, 1e-6, 64)  # lr * lambda = 1: one step lands near the global model
    local_step(spec, g, c, c.train, lt, 0)
    assert np.linalg.norm(c.personal["v"] - g) < np.linalg.norm(v - g)


def test_ditto_personalize_returns_private_model():
    spec, c, g = setup("ditto")
    lt = LocalTraining(MODEL, 1, 0.05, 8)
    local_step(spec, g, c, c.train, lt, 0)
    assert np.array_equal(personalize(spec, g, c, lt, 1), c.personal["v"])


def test_personalize_zero_epochs_is_global():
    spec, c, g = setup("fedavg_ft")
    assert np.array_equal(personalize(spec, g, c, LocalTraining(MODEL), 0), g)


def test_fedrep_personalize_keeps_encoder():
    spec, c, g = setup("fedrep")
    lt = LocalTraining(MODEL, 1, 0.1, 8)
    local_step(spec, g, c, c.train, lt, 0)
    p = personalize(spec, g, c, lt, 1)
    hs = MODEL.head_slice()
    enc = np.ones(g.size, bool)
    enc[hs] = False
    assert np.array_equal(p[enc], g[enc]) and not np.array_equal(p[hs], g[hs])


def test_personalize_empty_data_errors():
    spec, c, g = setup("fedavg_ft")
    c.train = c.train.subset([])
    with pytest.raises(ValueError):
        personalize(spec, g, c, LocalTraining(MODEL), 1)


def test_fedala_blend_weights_stay_in_unit_interval():
    spec, c, g = setup("fedala", ala_lr=50.0)
    lt = LocalTraining(MODEL, 1, 0.1, 8)
    for t in range(4):
        u = local_step(spec, g, c, c.train, lt, t)
        g = g + u.delta + 0.01
    w = c.personal["blend"]
    assert w.shape == (MODEL.head_slice().stop - MODEL.head_slice().start,)
    assert np.all((w >= 0) & (w <= 1))


def test_fedala_first_round_starts_from_global():
    spec, c, g = setup("fedala")
    lt = LocalTraining(MODEL, 1, 0.1, 8)
    a = local_step(spec, g, c, c.train, lt, 1)
    b = local_step(StrategyConfig("fedavg_ft"), g, _fresh("fedavg_ft", make_client()), c.train, lt, 1)
    assert np.array_equal(a.delta, b.delta)


def test_fedrep_global_head_never_changes():
    data = gen_synthetic(3, 4, 30, 0.2, 0)
    parts = dirichlet_partition(data, 5, 1.0, 0)
    clients = [fl.ClientState(i, False, p, None, None, float(len(p)), i) for i, p in enumerate(parts)]
    fed = fl.Federation(clients, LocalTraining(MODEL, 1, 0.1, 8), StrategyConfig("fedrep"),
                        DefenseConfig(), 3, 6, 0)
    init = init_model(MODEL, 0)
    final, _, _ = fl.run_training(init, fed)
    hs = MODEL.head_slice()
    assert np.array_equal(final[hs], init[hs]) and not np.array_equal(final, init)
