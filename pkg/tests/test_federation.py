import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fssl.errors import DegenerateLabels, EmptyClientDataset
from fssl.federation import (FederationConfig, RetrainConfig, client_update, fedavg_aggregate, num_selected,
                             read_round_log, retrain_server, run_pretraining, select_clients, train_centralized)
from fssl.flows import SubflowSet
from fssl.metrics import evaluate_model
from fssl.models import (Arch, ModelParams, ModelWidths, build_pretrain_model, build_retrain_model,
                         transfer_backbone)
from fssl.nn import mse_with_grad

import oracles

TINY = ModelWidths(conv1=4, conv2=4, hidden=8, head_hidden=8)


def subflows(rng, n, labels=None, num_features=24):
    values = rng.random((n, 45, 2)).astype(np.float32)
    features = rng.random((n, num_features))
    return SubflowSet(values, [f"f{i}" for i in range(n)], labels if labels is not None else [-1] * n, features)


def random_params(rng, scale=1.0, dtype=np.float64):
    shapes = {"a.weight": (3, 4), "a.bias": (3,), "b.weight": (2, 3, 2)}
    return ModelParams(Arch.PRETRAIN, {k: (scale * rng.normal(size=s)).astype(dtype) for k, s in shapes.items()})


def test_selection_counts():
    assert len(select_clients(100, 0.8, 1, 0)) == 80
    assert select_clients(10, 0.0, 1, 0).__len__() == 1
    assert select_clients(10, 1.0, 3, 0) == list(range(10))
    assert num_selected(100, 0.29) == 29


def test_selection_is_seeded_and_covers_clients():
    assert select_clients(100, 0.5, 4, 9) == select_clients(100, 0.5, 4, 9)
    seen = set()
    for r in range(1, 1001):
        chosen = select_clients(10, 0.5, r, 1)
        assert len(set(chosen)) == 5 and chosen == sorted(chosen)
        seen.update(chosen)
    assert seen == set(range(10))


def test_client_update_with_zero_lr_is_identity(rng):
    _, params = build_pretrain_model(0, widths=TINY)
    out, n, loss = client_update(params, subflows(rng, 20), FederationConfig(K=1, lr=0.0, batch_size=8))
    assert n == 20 and np.isfinite(loss)
    assert out.bitwise_equal(params)


def test_client_update_at_stationary_point(rng):
    net, params = build_pretrain_model(0, widths=TINY)
    data = subflows(rng, 16)
    data.features = net.predict(params.entries, data.model_inputs).astype(np.float64)
    out, _, loss = client_update(params, data, FederationConfig(K=1, batch_size=8))
    assert loss < 1e-12
    assert all(np.allclose(out[k], params[k], atol=1e-7) for k in params.entries)


def test_client_update_descends():
    improved = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net, params = build_pretrain_model(seed, widths=TINY)
        data = subflows(rng, 64)
        before = mse_with_grad(net.predict(params.entries, data.model_inputs), data.features)[0]
        out, _, _ = client_update(params, data, FederationConfig(K=1, batch_size=16, local_epochs=2, lr=0.003))
        after = mse_with_grad(net.predict(out.entries, data.model_inputs), data.features)[0]
        improved += after < before
    assert improved >= 18


def test_client_update_leaves_global_untouched(rng):
    _, params = build_pretrain_model(0, widths=TINY)
    snapshot = params.copy()
    client_update(params, subflows(rng, 10), FederationConfig(K=1, batch_size=4))
    assert params.bitwise_equal(snapshot)


def test_client_update_empty():
    _, params = build_pretrain_model(0, widths=TINY)
    with pytest.raises(EmptyClientDataset):
        client_update(params, SubflowSet.empty(), FederationConfig(K=1))


def test_fedavg_worked_example():
    def p(v):
        return ModelParams(Arch.PRETRAIN, {"w": np.array([v])})
    assert fedavg_aggregate([(p(1.0), 1), (p(4.0), 3)])["w"][0] == 3.25


def test_fedavg_single_client_identity(rng):
    for dtype in (np.float32, np.float64):
        params = random_params(rng, dtype=dtype)
        assert fedavg_aggregate([(params, 17)]).bitwise_equal(params)


def test_fedavg_cancellation_and_fixed_point(rng):
    w = random_params(rng)
    neg = ModelParams(w.arch, {k: -v for k, v in w.entries.items()})
    assert all(not np.any(v) for v in fedavg_aggregate([(w, 5), (neg, 5)]).entries.values())
    same = fedavg_aggregate([(w.copy(), n) for n in (1, 7, 3)])
    assert all(np.allclose(same[k], w[k], rtol=1e-15, atol=0) for k in w.entries)


@given(st.integers(2, 6), st.integers(0, 10_000))
def test_fedavg_is_convex_combination(m, seed):
    rng = np.random.default_rng(seed)
    updates = [(random_params(rng), int(rng.integers(1, 1000))) for _ in range(m)]
    agg = fedavg_aggregate(updates)
    for k in agg.entries:
        stack = np.stack([p[k] for p, _ in updates])
        assert np.all(agg[k] >= stack.min(axis=0) - 1e-12) and np.all(agg[k] <= stack.max(axis=0) + 1e-12)
        ref = oracles.weighted_mean([p[k] for p, _ in updates], [n for _, n in updates])
        assert np.max(np.abs(agg[k] - ref)) <= 1e-12


def test_fedavg_rejects_mixed_layouts(rng):
    a = random_params(rng)
    b = random_params(rng)
    del b.entries["a.bias"]
    with pytest.raises(Exception):
        fedavg_aggregate([(a, 1), (b, 1)])
    with pytest.raises(ValueError):
        fedavg_aggregate([])


def _clients(seed, k, n=12):
    rng = np.random.default_rng(seed)
    return [subflows(rng, n) for _ in range(k)]


def test_run_pretraining_records_and_log(tmp_path):
    config = FederationConfig(K=4, C=0.5, R=3, batch_size=8, seed=2)
    params, records = run_pretraining(_clients(0, 4), config, TINY, log_path=tmp_path / "rounds.jsonl")
    assert [r.round for r in records] == [1, 2, 3]
    assert all(len(r.clients) == 2 and r.client_sizes == [12, 12] for r in records)
    assert read_round_log(tmp_path / "rounds.jsonl") == records
    again, records2 = run_pretraining(_clients(0, 4), config, TINY)
    assert again.bitwise_equal(params) and records2 == records


def test_parallel_clients_match_serial():
    config = FederationConfig(K=4, C=1.0, R=2, batch_size=8, seed=5)
    serial, _ = run_pretraining(_clients(1, 4), config, TINY)
    config_par = FederationConfig(K=4, C=1.0, R=2, batch_size=8, seed=5, workers=3)
    parallel, _ = run_pretraining(_clients(1, 4), config_par, TINY)
    assert serial.bitwise_equal(parallel)


def test_run_pretraining_checks_client_count():
    with pytest.raises(ValueError):
        run_pretraining(_clients(0, 3), FederationConfig(K=4, R=1), TINY)


def test_single_client_equals_centralized():
    config = FederationConfig(K=1, C=1.0, R=3, local_epochs=2, batch_size=8, seed=4)
    data = _clients(3, 1, n=30)[0]
    fed, records = run_pretraining([data], config, TINY)
    central, losses = train_centralized(data, config, TINY)
    assert max(np.max(np.abs(fed[k] - central[k])) for k in fed.entries) <= 1e-6
    assert [r.global_loss for r in records] == losses


def test_early_stop_on_plateau():
    rng = np.random.default_rng(0)
    net, params = build_pretrain_model(0, widths=TINY)
    data = subflows(rng, 16)
    data.features = net.predict(params.entries, data.model_inputs).astype(np.float64)
    config = FederationConfig(K=1, C=1.0, R=50, batch_size=8, early_stop=True, lr=0.0)
    _, records = run_pretraining([data], config, TINY)
    assert len(records) == 6


def _separable(rng, n_per_class=20):
    values = np.zeros((2 * n_per_class, 45, 2), np.float32)
    values[n_per_class:, :, 0] = 1.0
    values += rng.normal(0, 0.05, values.shape).astype(np.float32)
    labels = [0] * n_per_class + [1] * n_per_class
    return SubflowSet(values, [f"f{i}" for i in range(len(labels))], labels)


def test_retrain_fits_separable_toy(rng):
    _, pre = build_pretrain_model(0, widths=TINY)
    data = _separable(rng)
    params, history = retrain_server(pre, data, RetrainConfig(epochs=200, batch_size=16, lr=0.01), 2)
    assert evaluate_model(params, data).accuracy == 1.0
    assert history[-1] < history[0]


def test_retrain_zero_epochs_returns_transferred_init(rng):
    _, pre = build_pretrain_model(0, widths=TINY)
    params, history = retrain_server(pre, _separable(rng), RetrainConfig(epochs=0, seed=3), 2, TINY)
    expected = transfer_backbone(pre, build_retrain_model(3, 2, TINY)[1])
    assert history == [] and params.bitwise_equal(expected)


def test_retrain_needs_two_classes(rng):
    _, pre = build_pretrain_model(0, widths=TINY)
    one_class = _separable(rng)[:20]
    with pytest.raises(DegenerateLabels):
        retrain_server(pre, one_class, RetrainConfig(epochs=1), 2)
    with pytest.raises(DegenerateLabels):
        retrain_server(pre, subflows(rng, 4), RetrainConfig(epochs=1), 2)
