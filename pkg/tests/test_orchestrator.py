import copy
import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flgames import datagen as dg
from flgames import game
from flgames import nnkernel as nn
from flgames import orchestrator as orc
from flgames.errors import ConfigError, VariantError
from flgames.game import EnsembleView


def small_fed(n_clients=2, n_total=600, seed=0):
    specs = dg.standard_specs(n_total, 200) if n_clients == 2 else dg.make_client_specs(n_clients, n_train_total=n_total, n_test=200)
    return dg.synth_federation(specs, seed, d_noise=2, causal_dim=2, spurious_dim=2)


def cfg(**kw):
    base = dict(hidden=(6,), phi_dim=5, batch_size=64, lr_w=1e-2, lr_phi=1e-2, max_rounds=6, eval_cap=500)
    base.update(kw)
    return orc.GameConfig(**base)


@pytest.mark.parametrize("t,n,expected", [(1, 3, (1,)), (2, 3, (2,)), (3, 3, (3,)), (4, 3, (1,)), (7, 2, (1,))])
def test_sequential_playing_order(t, n, expected):
    assert orc.playing_sequence(orc.SEQUENTIAL, t, n) == expected


def test_parallel_plays_everyone():
    assert orc.playing_sequence(orc.PARALLEL, 5, 4) == (1, 2, 3, 4)
    with pytest.raises(ConfigError):
        orc.playing_sequence("random", 1, 2)


def test_config_validation():
    with pytest.raises(ConfigError):
        orc.GameConfig(buffer_capacity=0)
    with pytest.raises(ConfigError):
        orc.GameConfig(c_percent=0)
    with pytest.raises(ConfigError):
        orc.GameConfig(c_percent=101)
    with pytest.raises(ConfigError):
        orc.GameConfig(stop_threshold=1.0)
    with pytest.raises(ConfigError):
        orc.GameConfig(fast_phi=True)
    assert orc.GameConfig(variant_phi=orc.VARIABLE, fast_phi=True).phi_c_percent == 100.0


def test_variant_names():
    assert orc.GameConfig().name == "F-FL Games"
    assert orc.GameConfig(schedule=orc.PARALLEL, smooth=True).name == "parallelized F-FL Games (Smooth)"
    v = orc.GameConfig(variant_phi=orc.VARIABLE, smooth=True, fast_phi=True)
    assert v.name == "V-FL Games (Smooth + Fast)"


def test_aggregation_weights_quarter_three_quarters():
    assert orc.aggregation_weights({1: 100, 2: 300}) == {1: 0.25, 2: 0.75}


def test_aggregate_phi_weighted_step():
    phi = nn.MlpParams([np.array([[1.0]])], [np.array([0.0])], ["elu"])
    g1 = nn.MlpParams([np.array([[4.0]])], [np.array([1.0])], ["elu"])
    g2 = nn.MlpParams([np.array([[8.0]])], [np.array([-1.0])], ["elu"])
    new = orc.aggregate_phi(phi, {1: g1, 2: g2}, {1: 100, 2: 300}, lr=0.1)
    assert new.weights[0][0, 0] == pytest.approx(1.0 - 0.1 * (0.25 * 4 + 0.75 * 8))
    assert new.biases[0][0] == pytest.approx(-0.1 * (0.25 - 0.75))
    with pytest.raises(ConfigError):
        orc.aggregate_phi(phi, {1: g1}, {1: 100, 2: 300}, lr=0.1)


def test_warm_start_lengths():
    assert orc.warm_start_length(orc.GameConfig(), 2, 60000) == 2
    assert orc.warm_start_length(orc.GameConfig(variant_phi=orc.VARIABLE), 2, 60000) == 234
    assert orc.warm_start_length(orc.GameConfig(warm_start_override=7), 2, 60000) == 7
    assert orc.warm_start_length(orc.GameConfig(warm_start_plays=3), 5, 60000) == 15
    assert orc.warm_start_length(orc.GameConfig(warm_start_plays=3, schedule=orc.PARALLEL), 5, 60000) == 3


def test_stopping_guard():
    c = orc.GameConfig(stop_threshold=0.6)
    assert not orc.stopping_check([0.9, 0.5], c, warm_start_len=2)
    assert orc.stopping_check([0.9, 0.8, 0.5], c, warm_start_len=2)
    assert not orc.stopping_check([0.9, 0.8, 0.7], c, warm_start_len=2)
    assert not orc.stopping_check([0.9, 0.8, 0.5], orc.GameConfig(), warm_start_len=2)


@settings(max_examples=40, deadline=None)
@given(history=st.lists(st.floats(0, 1), min_size=1, max_size=30), warm=st.integers(0, 30))
def test_stop_never_fires_during_warm_start(history, warm):
    c = orc.GameConfig(stop_threshold=0.99)
    if len(history) <= warm:
        assert not orc.stopping_check(history, c, warm)


def test_round_parity_variable():
    train, test = small_fed()
    c = cfg(variant_phi=orc.VARIABLE)
    res = orc.run_training(train, test, c, seed=1)
    assert [lg.phi_round for lg in res.logs] == [False, True] * 3
    assert [lg.predictor_round for lg in res.logs] == [1, 1, 2, 2, 3, 3]
    assert all(lg.acting == () for lg in res.logs if lg.phi_round)


def test_fixed_phi_even_rounds_are_noops():
    train, test = small_fed()
    c = cfg()
    state = orc.init_server(train, c, seed=3)
    ev = orc.pooled(train)
    state, first = orc.run_round(state, c, ev, ev)
    before = [w.copy() for w in state.predictors()]
    state, second = orc.run_round(state, c, ev, ev)
    assert second.phi_round and second.acting == ()
    assert all(nn.identical(a, b) for a, b in zip(before, state.predictors()))
    assert second.comm_rounds == first.comm_rounds


def test_skip_phi_rounds_collapses_counter():
    train, test = small_fed()
    res = orc.run_training(train, test, cfg(skip_phi_rounds=True), seed=1)
    assert [lg.predictor_round for lg in res.logs] == [1, 2, 3, 4, 5, 6]


def test_representation_gradient_needs_phi():
    train, _ = small_fed()
    state = orc.init_server(train, cfg(), seed=0)
    with pytest.raises(VariantError):
        orc.representation_gradient(state.clients[0], None, state.predictors(), None)


def test_fast_variant_uses_full_pass():
    train, _ = small_fed(n_total=512)
    c = cfg(variant_phi=orc.VARIABLE, fast_phi=True, batch_size=100)
    state = orc.init_server(train, c, seed=0)
    client = state.clients[0]
    orc.representation_gradient(client, state.phi, state.predictors(), c.phi_c_percent)
    assert client.phi_batches.cursor == 300  # ceil(256/100) = 3 batches


def _reference_round(clients, config, phi):
    """Deep-copy reference: every acting client answers the pre-round models."""
    frozen = copy.deepcopy(clients)
    for c in clients:
        other_ids = [k.client_id for k in frozen if k.client_id != c.client_id]
        c.snapshot = {k: frozen[k - 1].predictor for k in other_ids}
        c.snapshot_buffers = {
            k: (frozen[k - 1].buffer.average() if len(frozen[k - 1].buffer) else None) for k in other_ids
        }
    for c in clients:
        view = EnsembleView.for_client(c, len(clients), config.smooth, config.divisor_mode, config.smooth_mode)
        game.predictor_update(c, view, phi, config.local_steps, config.optimizer, config.smooth)
    return clients


@pytest.mark.parametrize("smooth", [False, True])
def test_parallel_snapshot_law(smooth):
    train, _ = small_fed(n_clients=3)
    c = cfg(schedule=orc.PARALLEL, smooth=smooth, skip_phi_rounds=True)
    state = orc.init_server(train, c, seed=4)
    ref = copy.deepcopy(state)
    ev = orc.pooled(train)
    for _ in range(3):
        state, _ = orc.run_round(state, c, ev, ev)
        _reference_round(ref.clients, c, ref.phi)
    for a, b in zip(state.predictors(), [cl.predictor for cl in ref.clients]):
        assert nn.identical(a, b)


def test_sequential_sees_latest_opponent():
    train, _ = small_fed()
    c = cfg(skip_phi_rounds=True)
    state = orc.init_server(train, c, seed=2)
    ev = orc.pooled(train)
    state, log1 = orc.run_round(state, c, ev, ev)
    assert log1.acting == (1,)
    assert nn.identical(state.clients[1].snapshot[1], state.clients[0].predictor)
    state, log2 = orc.run_round(state, c, ev, ev)
    assert log2.acting == (2,) and log2.comm_rounds == 2


def test_one_client_sequential_equals_parallel():
    train, test = small_fed()
    solo = [train[0]]
    seq = orc.run_training(solo, test, cfg(schedule=orc.SEQUENTIAL, max_rounds=5), seed=9)
    par = orc.run_training(solo, test, cfg(schedule=orc.PARALLEL, max_rounds=5), seed=9)
    assert nn.identical(seq.state.predictors()[0], par.state.predictors()[0])
    assert [lg.train_acc for lg in seq.logs] == [lg.train_acc for lg in par.logs]


def test_fedsgd_equals_centralized_step():
    train, test = small_fed(n_total=300)
    train = [train[0].subset(np.arange(100)), train[1]]  # uneven sizes 100 / 150
    c = cfg(hidden=(5,), optimizer="sgd", lr_w=0.3, batch_size=1000)
    model0 = orc._baseline_setup(train, test, c, 5)[0]
    res = orc.run_fedsgd_baseline(train, test, c, seed=5, rounds=1)
    pool = orc.pooled(train)
    _, g = orc._model_grad(model0, pool.inputs, pool.labels)
    central = nn.sgd_step(model0, g, 0.3)
    assert nn.max_abs_diff(res.model, central) < 1e-12


def test_fedsgd_aggregate_is_sample_weighted():
    rng = np.random.default_rng(0)
    model = nn.init_params([3, 2], 0)
    xs = [rng.normal(size=(n, 3)) for n in (10, 30)]
    ys = [rng.integers(0, 2, n) for n in (10, 30)]
    grads = {i + 1: orc._model_grad(model, x, y)[1] for i, (x, y) in enumerate(zip(xs, ys))}
    agg = orc.fedsgd_aggregate(grads, {1: 10, 2: 30})
    _, central = orc._model_grad(model, np.vstack(xs), np.concatenate(ys))
    assert nn.max_abs_diff(agg, central) < 1e-12


def test_fedavg_runs_and_logs():
    train, test = small_fed()
    res = orc.run_fedavg_baseline(train, test, cfg(), seed=0, rounds=2)
    assert len(res.logs) == 2 and 0 <= res.final_test_acc <= 1


def test_training_is_deterministic():
    train, test = small_fed()
    c = cfg(variant_phi=orc.VARIABLE, smooth=True, schedule=orc.PARALLEL)
    a = orc.run_training(train, test, c, seed=11)
    b = orc.run_training(train, test, c, seed=11)
    strip = lambda logs: [dataclasses.replace(lg, wall_clock=0.0) for lg in logs]
    assert strip(a.logs) == strip(b.logs)
    assert all(nn.identical(x, y) for x, y in zip(a.state.predictors(), b.state.predictors()))
    assert nn.identical(a.state.phi, b.state.phi)


def test_stop_fires_and_is_recorded():
    train, test = small_fed()
    res = orc.run_training(train, test, cfg(stop_threshold=0.999, max_rounds=20, skip_phi_rounds=True), seed=0)
    assert res.stopped and res.stop_predictor_round == 3  # first round past the 2-round warm start
    assert not res.hit_max_rounds


def test_eval_cache_matches_direct_ensemble():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 3))
    ev = orc.EvalSet(x, rng.integers(0, 2, 40))
    preds = [nn.init_params([3, 4, 2], s) for s in range(3)]
    phi = None
    for step in range(4):
        np.testing.assert_array_equal(ev.logits(preds, phi), game.ensemble_logits(preds, phi, x))
        preds[step % 3] = nn.init_params([3, 4, 2], 10 + step)
    phi = nn.init_params([3, 3], 1, output_activation=nn.ELU)
    preds = [nn.init_params([3, 2], s) for s in range(2)]
    np.testing.assert_array_equal(ev.logits(preds, phi), game.ensemble_logits(preds, phi, x))
