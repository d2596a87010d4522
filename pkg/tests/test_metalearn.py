import logging

import numpy as np
import pytest

from covrep.datagen import GroundTruthPropensity, Task, gen_representation, gen_task, gen_taskset
from covrep.harness.config import PROTOCOL_META
from covrep.metalearn import (
    DivergenceError,
    InnerBatch,
    MetaConfig,
    MetaModel,
    SubTask,
    adapt,
    exact_outer_gradients,
    init_model,
    maml_train,
    maml_train_propensity,
    meta_loss,
    model_from_json,
    model_to_json,
    outer_gradients,
    outer_gradients_second_order,
    split_tasks,
    task_loss,
)
from covrep.numerics import MlpParams, Rng, forward, linear_map


def _toy_tasks(K=3, n=40, d=4, seed=0):
    return gen_taskset("linear", d, 2, K, n, Rng(seed)).tasks


def test_split_example_and_counts():
    t = Task(0, np.array([[1.0], [2.0], [3.0]]), np.array([1, 0, 1]), np.array([0.1, 0.2, 0.3]))
    subs = split_tasks([t])
    assert [(s.arm, s.n) for s in subs] == [(1, 2), (0, 1)]
    tasks = _toy_tasks(K=5)
    subs = split_tasks(tasks)
    assert len(subs) == 10
    assert sum(s.n for s in subs) == sum(t.n for t in tasks)


def test_split_is_lossless_and_arm_pure():
    tasks = _toy_tasks(K=4, n=30)
    subs = split_tasks(tasks)
    for t in tasks:
        for s in (s for s in subs if s.parent == t.id):
            rows = {tuple(r) for r in t.X[t.treat == s.arm]}
            assert {tuple(r) for r in s.X} == rows
        mine = [s for s in subs if s.parent == t.id]
        assert sorted(np.concatenate([s.y for s in mine])) == sorted(t.y)


def test_single_armed_task_dropped_with_warning(caplog):
    t = Task(7, np.zeros((3, 1)), np.ones(3, dtype=int), np.zeros(3))
    with caplog.at_level(logging.WARNING):
        assert split_tasks([t]) == []
    assert "single arm" in caplog.text


def test_task_loss_examples():
    enc = linear_map(np.eye(1))
    head = linear_map(np.array([[1.0]]))
    assert task_loss(head, enc, np.array([[1.0]]), np.array([3.0])) == 4.0
    assert task_loss(head, enc, np.array([[2.0], [5.0]]), np.array([2.0, 5.0])) == 0.0
    gen = np.random.default_rng(0)
    enc2 = init_model(3, MetaConfig(s=2, encoder_hidden=(4,)), Rng(0))
    X, y = gen.normal(size=(9, 3)), gen.normal(size=9)
    pred = forward(enc2.head, forward(enc2.encoder, X))[:, 0]
    assert task_loss(enc2.head, enc2.encoder, X, y) == pytest.approx(np.sum((y - pred) ** 2), rel=1e-14)


def test_task_loss_empty_batch_warns(caplog):
    enc = linear_map(np.eye(2))
    with caplog.at_level(logging.WARNING):
        assert task_loss(linear_map(np.ones((2, 1))), enc, np.zeros((0, 2)), np.zeros(0)) == 0.0
    assert "empty" in caplog.text


def test_meta_loss_is_mean_of_adapted_losses():
    cfg = MetaConfig(s=2, encoder_hidden=(3,), inner_rate=0.01)
    model = init_model(4, cfg, Rng(1))
    subs = split_tasks(_toy_tasks())
    per = [task_loss(adapt(model, s), model.encoder, s.X, s.y) for s in subs]
    assert meta_loss(model, subs) == pytest.approx(np.mean(per), rel=1e-14)
    assert meta_loss(model, subs[:1]) == pytest.approx(per[0], rel=1e-14)
    assert meta_loss(model, [subs[0]] * 3) == pytest.approx(per[0], rel=1e-14)


def test_zero_rate_fixpoint_is_bit_exact():
    cfg = MetaConfig(s=3, encoder_hidden=(5, 5), inner_rate=0.0, outer_rate=0.0, rep_rate=0.0, meta_iters=20, inner_shots=8)
    init = init_model(4, cfg, Rng(2))
    out = maml_train(_toy_tasks(), cfg, Rng(2))
    assert out.encoder.equals(init.encoder) and out.head.equals(init.head)


def test_zero_rate_fixpoint_propensity():
    cfg = MetaConfig(s=3, encoder_hidden=(5,), inner_rate=0.0, outer_rate=0.0, rep_rate=0.0, meta_iters=5, inner_shots=8)
    init = init_model(4, cfg, Rng(3), output_activation="sigmoid")
    out = maml_train_propensity(_toy_tasks(), cfg, Rng(3))
    assert out.encoder.equals(init.encoder) and out.head.equals(init.head)


def test_single_outer_step_matches_least_squares_gradient():
    gen = np.random.default_rng(5)
    X = gen.normal(size=(20, 3))
    y = X @ np.array([1.0, -1.0, 2.0]) + 0.3
    cfg = MetaConfig(s=3, encoder_hidden=(), encoder_activation="identity", inner_rate=0.0, outer_rate=0.01,
                     rep_rate=0.0, batch_tasks=1, inner_shots=5, meta_iters=1)
    model = init_model(3, cfg, Rng(0))
    out = maml_train(None, cfg, Rng(0), model=model, subtasks=[SubTask(0, 1, X, y)])
    # recover which points formed D' from the same stream
    from covrep.metalearn import sample_batch

    batch = sample_batch([SubTask(0, 1, X, y)], cfg, Rng(0).child("meta/iter").generator())
    Z = forward(model.encoder, batch.X_out[0])
    w, b = model.head.weights[0][:, 0], model.head.biases[0][0]
    r = Z @ w + b - batch.y_out[0]
    gw, gb = 2 * Z.T @ r, 2 * r.sum()
    assert np.allclose(out.head.weights[0][:, 0], w - 0.01 * gw, atol=1e-12)
    assert out.head.biases[0][0] == pytest.approx(b - 0.01 * gb, abs=1e-12)
    assert out.encoder.equals(model.encoder)


def test_adapt_examples():
    gen = np.random.default_rng(6)
    X = gen.normal(size=(15, 3))
    y = gen.normal(size=15)
    cfg = MetaConfig(s=3, encoder_hidden=(), encoder_activation="identity", inner_rate=0.0)
    model = init_model(3, cfg, Rng(1))
    assert adapt(model, SubTask(0, 1, X, y)).equals(model.head)
    # linear head, one step: phi - alpha * normal-equations gradient
    cfg = MetaConfig(s=3, encoder_hidden=(), encoder_activation="identity", inner_rate=0.005)
    model = MetaModel(model.encoder, model.head, cfg)
    Z = forward(model.encoder, X)
    A = np.hstack([Z, np.ones((15, 1))])
    theta = np.concatenate([model.head.weights[0][:, 0], model.head.biases[0]])
    grad = 2 * (A.T @ A @ theta - A.T @ y)
    new = adapt(model, SubTask(0, 1, X, y))
    assert np.allclose(np.concatenate([new.weights[0][:, 0], new.biases[0]]), theta - 0.005 * grad, atol=1e-12)
    # perfectly fit sub-task leaves the head unchanged
    fitted = model.predict(X)
    assert np.allclose(adapt(model, SubTask(0, 1, X, fitted)).flat(), model.head.flat(), atol=1e-15)


def test_adapt_empty_subtask_rejected():
    model = init_model(2, MetaConfig(s=1, encoder_hidden=()), Rng(0))
    with pytest.raises(ValueError):
        adapt(model, SubTask(0, 1, np.zeros((0, 2)), np.zeros(0)))


def _toy_batch(seed=0):
    gen = np.random.default_rng(seed)
    return InnerBatch(
        [gen.normal(size=(4, 2)), gen.normal(size=(3, 2))],
        [gen.normal(size=4), gen.normal(size=3)],
        [gen.normal(size=(5, 2)), gen.normal(size=(6, 2))],
        [gen.normal(size=5), gen.normal(size=6)],
    )


def test_first_order_gradient_matches_fd_with_frozen_adapted_heads():
    # 5-parameter toy: encoder 2->1 tanh (3 params) and linear head 1->1 (2 params)
    enc = MlpParams((2, 1), [np.array([[0.4], [-0.3]])], [np.array([0.1])], "tanh", "identity")
    head = linear_map(np.array([[0.7]]), np.array([-0.2]))
    batch = _toy_batch()
    alpha = 0.05
    _, g_head, g_enc = outer_gradients(enc, head, batch, alpha)
    from covrep.metalearn import head_gradient
    from covrep.numerics import sgd_step

    adapted = [sgd_step(head, head_gradient(head, forward(enc, Xi), yi)[1], alpha) for Xi, yi in zip(batch.X_in, batch.y_in)]

    def frozen_loss(enc_vec, shift):
        e = enc.with_flat(enc_vec)
        total = 0.0
        for a, Xo, yo in zip(adapted, batch.X_out, batch.y_out):
            a2 = a.with_flat(a.flat() + shift)
            r = forward(a2, forward(e, Xo))[:, 0] - yo
            total += r @ r
        return total

    h = 1e-6
    v = enc.flat()
    fd_enc = [(frozen_loss(v + h * e, 0) - frozen_loss(v - h * e, 0)) / (2 * h) for e in np.eye(v.size)]
    fd_head = [(frozen_loss(v, h * e) - frozen_loss(v, -h * e)) / (2 * h) for e in np.eye(2)]
    assert np.allclose(g_enc.flat(), fd_enc, rtol=1e-3, atol=1e-8)
    assert np.allclose(g_head.flat(), fd_head, rtol=1e-3, atol=1e-8)


def test_second_order_linear_gradient_matches_exact_fd():
    enc = MlpParams((2, 2), [np.array([[0.4, 0.1], [-0.3, 0.5]])], [np.array([0.1, -0.05])], "tanh", "identity")
    head = linear_map(np.array([[0.7], [-0.4]]), np.array([-0.2]))
    batch = _toy_batch(1)
    _, gh, ge = outer_gradients_second_order(enc, head, batch, 0.03)
    fd_h, fd_e = exact_outer_gradients(enc, head, batch, 0.03)
    assert np.allclose(gh.flat(), fd_h.flat(), rtol=1e-6, atol=1e-9)
    assert np.allclose(ge.flat(), fd_e.flat(), rtol=1e-6, atol=1e-9)


def test_training_is_deterministic():
    cfg = MetaConfig(s=2, encoder_hidden=(4,), meta_iters=15, inner_shots=8, optimizer="adam")
    a = maml_train(_toy_tasks(), cfg, Rng(4))
    b = maml_train(_toy_tasks(), cfg, Rng(4))
    assert a.encoder.equals(b.encoder) and a.head.equals(b.head) and a.history == b.history


def test_divergence_guard():
    cfg = MetaConfig(s=2, encoder_hidden=(8,), inner_rate=5.0, outer_rate=5.0, rep_rate=5.0, meta_iters=200, inner_shots=10)
    with pytest.raises(DivergenceError):
        maml_train(_toy_tasks(n=200), cfg, Rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        MetaConfig(inner_rate=-1)
    with pytest.raises(ValueError):
        MetaConfig(head_class="rbf")
    with pytest.raises(ValueError):
        MetaConfig(order="second", head_class="tanh")
    with pytest.raises(ValueError):
        MetaConfig.from_dict({"s": 3, "bogus": 1})


def test_model_json_roundtrip_value_exact():
    cfg = MetaConfig(s=3, encoder_hidden=(5, 4), head_class="tanh", head_hidden=(3,), meta_iters=3, inner_shots=8)
    model = maml_train(_toy_tasks(), cfg, Rng(8))
    back = model_from_json(model_to_json(model))
    assert back.encoder.equals(model.encoder) and back.head.equals(model.head)
    assert back.config == model.config and back.seed == model.seed


def _prop_cfg(**kw):
    base = dict(s=4, encoder_hidden=(8,), head_class="linear", optimizer="adam", inner_rate=0.001,
                outer_rate=0.01, rep_rate=0.01, meta_iters=300, inner_shots=20)
    base.update(kw)
    return MetaConfig(**base)


def test_propensity_all_treated_goes_to_one():
    rep = gen_representation("full", 3, 3, Rng(0))
    gen = np.random.default_rng(0)
    tasks = []
    for k in range(3):
        X = gen.uniform(-1, 1, (100, 3))
        tasks.append(Task(k, X, np.ones(100, dtype=int), np.zeros(100)))
    model = maml_train_propensity(tasks, _prop_cfg(), Rng(1))
    p = model.predict(tasks[0].X)
    assert np.all(p > 0.95)


def test_propensity_half_tasks_center_at_half():
    rep = gen_representation("full", 3, 3, Rng(0))
    tasks = [gen_task(rep, GroundTruthPropensity("fixed", p=0.5), 200, Rng(k)) for k in range(4)]
    model = maml_train_propensity(tasks, _prop_cfg(), Rng(2))
    for t in tasks:
        assert abs(model.predict(t.X).mean() - 0.5) < 0.05


def _protocol_cfg(**kw):
    return MetaConfig.from_dict({**PROTOCOL_META, "head_class": "linear", **kw})


@pytest.mark.parametrize("seed", range(5))
def test_meta_loss_decreases_on_simulation_protocol(seed):
    ts = gen_taskset("neural", 300, 50, 20, 1000, Rng(seed))
    cfg = _protocol_cfg(meta_iters=150)
    subs = split_tasks(ts)
    init = init_model(300, cfg, Rng(seed))
    trained = maml_train(ts, cfg, Rng(seed), subtasks=subs)
    assert meta_loss(trained, subs) < meta_loss(init, subs)


def test_learned_representation_beats_raw_covariates_for_linear_truth():
    # simulation-protocol dimensions: with n0 = 200 < d the raw fit is underdetermined
    n0 = 200
    wins = []
    for seed in range(5):
        ts = gen_taskset("linear", 300, 50, 20, 1000, Rng(seed), n_target=n0 + 2000)
        model = maml_train(ts, _protocol_cfg(s=50, meta_iters=800), Rng(seed))
        t = ts.target
        errs = {}
        for name, feats in (("rep", model.represent(t.X)), ("raw", t.X)):
            A = np.hstack([feats, np.ones((t.n, 1))])
            coef, *_ = np.linalg.lstsq(A[:n0], t.y1[:n0], rcond=None)
            errs[name] = np.mean((A[n0:] @ coef - t.y1[n0:]) ** 2)
        wins.append(errs["raw"] - errs["rep"])
    assert np.mean(wins) > 0
