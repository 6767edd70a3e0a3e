import math

import numpy as np
import pytest

from clchan import channel as ch
from clchan import harness as hn
from clchan import predictors as pr
from clchan import regularizers as rg
from clchan.channel import CLEAN
from clchan.harness import EvalMatrix, TrainConfig


def tiny_tasks(names=("umi-compact", "umi-dense"), n_train=48, seed=0):
    return hn.make_task_sequence([ch.preset(n) for n in names], n_train=n_train, n_heldout=40, window=4, seed=seed)


def fresh(backbone="gru", seed=0, hidden=6, window=4):
    return pr.predictor_for(ch.preset("umi-compact"), backbone, hidden, window, seed)


# config ----------------------------------------------------------------------------


@pytest.mark.parametrize(
    "bad", [{"eta": 0.0}, {"eta": -1.0}, {"epochs": 0}, {"regimen": "replay"}, {"alpha": -1.0}, {"xi": 0.0}]
)
def test_train_config_invariants(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_regimen_state_type_must_match():
    p = fresh()
    ds = tiny_tasks()[0].train
    with pytest.raises(TypeError):
        hn.train_task(p, ds, rg.EwcBank(p.n_params), TrainConfig(regimen="si", epochs=1))
    with pytest.raises(TypeError):
        hn.train_task(p, ds, None, TrainConfig(regimen="ewc", epochs=1))


# single steps against hand-computed oracles ----------------------------------------


def scalar_antenna_task(n=4, seed=0):
    cfg = ch.preset("umi-dense", n_tx=1, n_rx=1)
    return cfg, ch.build_task_dataset(cfg, n, T=1, seed=seed)


def manual_linear_grad(W, b, ds):
    x = ds.X.reshape(len(ds), -1)
    h = ds.H.reshape(len(ds), -1)
    r = (x @ W + b - h) / np.sum(h * h, axis=1, keepdims=True)
    return 2.0 * x.T @ r / len(ds), 2.0 * r.sum(axis=0) / len(ds)


@pytest.mark.parametrize("regimen", ["naive", "ewc"])
def test_one_sgd_step_matches_hand_oracle(regimen):
    cfg, ds = scalar_antenna_task()
    p = pr.predictor_for(cfg, "linear", window=1, seed=4)
    assert p.n_params == 6
    W, b = p.params["W"].data.copy(), p.params["b"].data.copy()
    theta = pr.flatten_params(p)

    state = None
    g_reg = np.zeros(6)
    if regimen == "ewc":
        state = rg.EwcBank(6, alpha=0.8)
        anchor, fisher = np.linspace(-1, 1, 6), np.linspace(0.1, 0.6, 6)
        rg.ewc_register_task(state, anchor, fisher)
        g_reg = 0.8 * fisher * (theta - anchor)

    gW, gb = manual_linear_grad(W, b, ds)
    eta = 0.3
    expected = theta - eta * (np.concatenate([gW.ravel(), gb]) + g_reg)
    hn.train_task(p, ds, state, TrainConfig(regimen=regimen, epochs=1, batch_size=len(ds), eta=eta))
    np.testing.assert_allclose(pr.flatten_params(p), expected, rtol=1e-12, atol=1e-15)


def test_si_importance_replays_from_logged_gradients():
    tasks = tiny_tasks()
    p = fresh(seed=1)
    cfg = TrainConfig(regimen="si", epochs=3, batch_size=16, eta=0.05, beta=0.5, xi=1e-3, seed=1)
    state = hn.make_regimen_state(cfg, p)
    theta0 = pr.flatten_params(p)
    log = hn.train_task(p, tasks[0].train, state, cfg, record_grads=True)
    assert len(log.grads) == log.steps == 9

    work = np.zeros(p.n_params)
    for g in log.grads:
        work += (g * g) * cfg.eta
    delta = pr.flatten_params(p) - theta0
    np.testing.assert_array_equal(state.omega, work / (delta * delta + cfg.xi))
    np.testing.assert_array_equal(state.omega_tilde, 0.0)
    np.testing.assert_array_equal(state.theta_ref, pr.flatten_params(p))


def test_si_accumulates_task_gradient_only():
    tasks = tiny_tasks()
    p = fresh(seed=2)
    cfg = TrainConfig(regimen="si", epochs=2, batch_size=16, eta=0.05, beta=5.0, xi=1e-3, seed=2)
    state = hn.make_regimen_state(cfg, p)
    hn.train_task(p, tasks[0].train, state, cfg, task_index=0)
    theta_ref = state.theta_ref.copy()
    log = hn.train_task(p, tasks[1].train, state, cfg, task_index=1, record_grads=True)
    work = np.zeros(p.n_params)
    for g in log.grads:
        work += (g * g) * cfg.eta
    delta = pr.flatten_params(p) - theta_ref
    omega_first = state.omega - work / (delta * delta + cfg.xi)
    assert log.epochs[-1]["reg_loss"] > 0
    assert (omega_first >= -1e-12 * np.abs(state.omega).max()).all()


def test_log_records_epochs():
    p = fresh()
    log = hn.train_task(p, tiny_tasks()[0].train, None, TrainConfig(epochs=3, batch_size=10))
    assert [e["epoch"] for e in log.epochs] == [0, 1, 2]
    assert log.steps == 3 * 5
    for e in log.epochs:
        assert e["reg_loss"] == 0.0 and e["task_loss"] > 0 and e["grad_norm"] > 0


def test_end_of_task_hook_runs_once_per_task():
    tasks = tiny_tasks(("umi-compact", "umi-dense", "umi-standard"))
    calls = []
    res = hn.run_sequence(
        tasks,
        TrainConfig(regimen="ewc", epochs=1, hidden_size=4, batch_size=24),
        on_task_end=lambda k, p, s: calls.append((k, len(s))),
    )
    assert calls == [(0, 1), (1, 2), (2, 3)]
    assert len(res.state) == 3


def test_divergence_is_reported():
    cfg, ds = scalar_antenna_task(n=16)
    p = pr.predictor_for(cfg, "linear", window=1, seed=0)
    with pytest.raises(hn.DivergenceError) as info:
        hn.train_task(p, ds, None, TrainConfig(epochs=50, batch_size=4, eta=1e4))
    assert info.value.step is not None and info.value.step >= 0
    assert "step" in str(info.value)


# regimen-off equivalence -------------------------------------------------------------


def trajectory(regimen, tasks, **kw):
    p = fresh(seed=3)
    cfg = TrainConfig(regimen=regimen, epochs=2, batch_size=16, eta=0.05, seed=3, **kw)
    state = hn.make_regimen_state(cfg, p)
    out = []
    for k, split in enumerate(tasks):
        hn.train_task(p, split.train, state, cfg, task_index=k)
        out.append(pr.flatten_params(p))
    return np.concatenate(out)


def test_disabled_regimens_match_naive_bit_for_bit():
    tasks = tiny_tasks(("umi-compact", "umi-dense", "umi-standard"))
    naive = trajectory("naive", tasks)
    np.testing.assert_array_equal(trajectory("ewc", tasks, alpha=0.0), naive)
    np.testing.assert_array_equal(trajectory("si", tasks, beta=0.0), naive)


def test_empty_bank_matches_naive_for_any_alpha():
    tasks = tiny_tasks(("umi-dense",))
    np.testing.assert_array_equal(trajectory("ewc", tasks, alpha=123.0), trajectory("naive", tasks))
    np.testing.assert_array_equal(trajectory("si", tasks, beta=7.0), trajectory("naive", tasks))


def test_regimens_do_change_later_tasks():
    tasks = tiny_tasks()
    naive = trajectory("naive", tasks)
    assert not np.array_equal(trajectory("ewc", tasks, alpha=50.0), naive)
    assert not np.array_equal(trajectory("si", tasks, beta=0.5), naive)


# sequences -------------------------------------------------------------------------


def test_sequence_matrix_shape_and_triangle():
    res = hn.run_sequence(tiny_tasks(), TrainConfig(epochs=1, hidden_size=4))
    v = res.matrix.values
    assert v.shape == (2, 2)
    assert np.isnan(v[0, 1]) and not np.isnan(v[1, 0])
    assert (v[~np.isnan(v)] >= 0).all()
    assert [(j, a) for j, a, _ in res.matrix.records()] == [(0, 0), (0, 1), (1, 1)]


def test_single_task_has_no_forgetting():
    res = hn.run_sequence(tiny_tasks(("umi-compact",)), TrainConfig(epochs=1, hidden_size=4))
    assert res.matrix.values.shape == (1, 1)
    with pytest.raises(ValueError):
        hn.forgetting_metrics(res.matrix)


@pytest.mark.parametrize("regimen", hn.REGIMENS)
def test_repeated_task_does_not_forget(regimen):
    # a convex backbone trained near its optimum, so the second pass has
    # nothing left to learn; beta keeps eta * beta * max(omega) below 2
    split = tiny_tasks(("umi-standard",), n_train=256)[0]
    cfg = TrainConfig(regimen=regimen, backbone="linear", epochs=60, batch_size=32, eta=0.2, beta=0.1, xi=1e-3)
    f = hn.forgetting_metrics(hn.run_sequence([split, split], cfg).matrix)
    assert abs(f.absolute[0]) <= 0.02


def test_sequence_is_reproducible():
    tasks = tiny_tasks()
    cfg = TrainConfig(regimen="si", epochs=2, hidden_size=4, eta=0.05)
    a = hn.run_sequence(tasks, cfg).matrix.values
    b = hn.run_sequence(tiny_tasks(), cfg).matrix.values
    np.testing.assert_array_equal(a, b)


def test_run_sequence_needs_heldout():
    tasks = [t.train for t in tiny_tasks()]
    with pytest.raises(ValueError):
        hn.run_sequence(tasks, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        hn.run_sequence([], TrainConfig(epochs=1), heldout=[])


def test_task_sequence_splits():
    tasks = tiny_tasks()
    for t in tasks:
        assert t.train.snr_db == t.train.scenario.snr_db_train
        assert t.train.seed != t.heldout.seed
        assert not np.array_equal(t.train.H[:5], t.heldout.H[:5])
    clean = hn.make_task_sequence([ch.preset("umi-compact"), ch.preset("umi-dense")], 48, 40, 4, seed=0, snr_db=CLEAN)
    for c, t in zip(clean, tasks):
        np.testing.assert_array_equal(c.train.H, t.train.H)
        assert c.train.snr_db == CLEAN and not np.array_equal(c.train.X, t.train.X)


# forgetting metrics ------------------------------------------------------------------


def test_forgetting_headline_example():
    m = EvalMatrix(np.array([[0.08, np.nan], [0.11, 0.05]]))
    f = hn.forgetting_metrics(m)
    assert f.absolute[0] == pytest.approx(0.03, abs=1e-15)
    assert f.relative[0] == pytest.approx(0.375, rel=1e-12)
    assert f.db[0] == pytest.approx(10 * math.log10(0.11 / 0.08), rel=1e-12)


def test_constant_matrix_has_no_forgetting():
    m = EvalMatrix(np.tril(np.full((4, 4), 0.2)) + np.triu(np.full((4, 4), np.nan), 1))
    f = hn.forgetting_metrics(m)
    np.testing.assert_array_equal(f.absolute, 0.0)
    np.testing.assert_array_equal(f.relative, 0.0)
    assert f.mean_absolute == 0.0


def test_backward_transfer_is_negative():
    f = hn.forgetting_metrics(EvalMatrix(np.array([[0.10, np.nan], [0.07, 0.2]])))
    assert f.absolute[0] == pytest.approx(-0.03) and f.relative[0] < 0 and f.db[0] < 0


def test_forgetting_uses_final_row():
    v = np.array([[0.1, np.nan, np.nan], [0.5, 0.2, np.nan], [0.15, 0.3, 0.4]])
    f = hn.forgetting_metrics(EvalMatrix(v))
    np.testing.assert_allclose(f.absolute, [0.05, 0.1])
    assert f.mean_relative == pytest.approx((0.5 + 0.5) / 2)


# SNR sweep ----------------------------------------------------------------------------


def test_clean_point_equals_noiseless_evaluation():
    p = fresh(window=8)
    sc = ch.preset("umi-compact")
    (snr, db), = hn.evaluate_nmse_vs_snr(p, sc, [CLEAN], n_eval=200, seed=3)
    clean = ch.build_task_dataset(sc, 200, 8, hn.derive_seed(3, 99, 0))
    assert snr == CLEAN
    assert db == 10 * math.log10(pr.dataset_nmse(p, clean))


def test_zero_output_model_is_zero_db():
    p = fresh(window=8)
    p.params["W_out"].data[...] = 0.0
    p.params["b_out"].data[...] = 0.0
    for _, db in hn.evaluate_nmse_vs_snr(p, ch.preset("umi-dense"), [0, 10, 20, CLEAN], n_eval=100):
        assert db == 0.0


def test_sweep_deterministic_and_validated():
    p = fresh(window=8)
    sc = ch.preset("umi-dense")
    assert hn.evaluate_nmse_vs_snr(p, sc, [0, 5], 100, 1) == hn.evaluate_nmse_vs_snr(p, sc, [0, 5], 100, 1)
    with pytest.raises(ValueError):
        hn.evaluate_nmse_vs_snr(p, sc, [], 100)
    with pytest.raises(ValueError):
        hn.evaluate_nmse_vs_snr(p, sc, [0], 99)


# memory accounting ----------------------------------------------------------------------


def memory_after(regimen, k, consolidate=False):
    names = ["umi-compact", "umi-dense", "umi-standard"] * 3
    tasks = hn.make_task_sequence([ch.preset(n) for n in names[:k]], n_train=8, n_heldout=8, window=2)
    res = hn.run_sequence(tasks, TrainConfig(regimen=regimen, epochs=1, hidden_size=3, batch_size=8, consolidate=consolidate))
    return hn.memory_accounting(res.state, res.predictor.n_params), res.predictor.n_params


@pytest.mark.parametrize("k", [1, 2, 4, 8])
def test_memory_counts(k):
    si, m = memory_after("si", k)
    assert si == {"model": m, "regimen_extra": 3 * m, "transient": 0}
    ewc, _ = memory_after("ewc", k)
    assert ewc == {"model": m, "regimen_extra": 2 * m * k, "transient": 2 * m}
    cons, _ = memory_after("ewc", k, consolidate=True)
    assert cons["regimen_extra"] == 2 * m
    naive, _ = memory_after("naive", k)
    assert naive["regimen_extra"] == 0


def test_memory_rejects_unknown_state():
    with pytest.raises(TypeError):
        hn.memory_accounting(object(), 10)
