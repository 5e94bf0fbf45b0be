import asyncio

import numpy as np
import pytest

from clusterfl.core.utils import derive_seed, make_rng
from clusterfl.fl import (
    TRIALS,
    TUNED_PRESETS,
    ClientState,
    aggregate,
    eval_loss,
    fl_vs_isolated_table,
    local_train,
    run_fl,
    run_isolated,
    select_clients,
    tune_grid,
    tune_trials,
)
from clusterfl.models import FleetSpec, OptimizerFamily, OptimizerSpec, TrainConfig
from clusterfl.nn import adam1, backward, build_autoencoder, sgd
from clusterfl.synth import make_fleet

CONFIG = TrainConfig(batch_size=8, l2=1e-5)


def _client(client_id, rng, n_rows, opt=None):
    data = rng.uniform(0.0, 1.0, size=(n_rows, 27))
    return ClientState(client_id=client_id, device_id=f"dev{client_id}", train_data=data[:-2],
                       eval_data=data[-2:], client_opt=opt or sgd(0.05))


def test_client_requires_training_rows():
    with pytest.raises(ValueError):
        ClientState(client_id=0, device_id="d", train_data=np.zeros((0, 27)), eval_data=np.zeros((0, 27)),
                    client_opt=sgd(0.1))


def test_aggregate_weights_by_sample_count():
    g = aggregate([(np.array([1.0, 0.0]), 1), (np.array([0.0, 1.0]), 3)])
    np.testing.assert_allclose(g, [-0.25, -0.75])
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([(np.zeros(2), 1), (np.zeros(3), 1)])


def test_aggregate_ignores_client_order():
    rng = np.random.default_rng(11)
    deltas = [(rng.normal(size=50), int(rng.integers(1, 100))) for _ in range(8)]
    expected = aggregate(deltas)
    for _ in range(5):
        shuffled = [deltas[i] for i in rng.permutation(len(deltas))]
        np.testing.assert_allclose(aggregate(shuffled), expected, rtol=0, atol=1e-12)


def test_one_step_sgd_local_train_matches_closed_form():
    template = build_autoencoder(27, 2)
    data = np.random.default_rng(4).uniform(size=(6, 27))
    client = ClientState(client_id=0, device_id="d", train_data=data, eval_data=data[:1], client_opt=sgd(0.1))
    W = template.flatten()
    # 6 行 < batch_size，一个 epoch 恰好一步
    params, n_c = local_train(client, W, 1, template=template, train_config=CONFIG, seed=0)
    assert n_c == 6
    expected = W - 0.1 * backward(template.copy_with(W), data, l2=CONFIG.l2)
    np.testing.assert_allclose(params, expected, rtol=0, atol=1e-14)


def test_single_client_round_equals_its_local_model():
    template = build_autoencoder(27, 4)
    client = _client(0, np.random.default_rng(8), 20)
    W0 = template.flatten()
    fl = asyncio.run(run_fl([client.fresh()], W0, template, 1, 3, sgd(1.0), CONFIG, seed=6))
    expected, _ = local_train(client.fresh(), W0, 3, template=template, train_config=CONFIG, seed=6)
    np.testing.assert_allclose(fl.params, expected, rtol=0, atol=1e-12)


def test_isolated_equals_fl_for_single_client():
    template = build_autoencoder(27, 4)
    client = _client(0, np.random.default_rng(9), 20)
    W0 = template.flatten()
    fl = asyncio.run(run_fl([client.fresh()], W0, template, 4, 2, sgd(1.0), CONFIG, seed=6))
    isolated = asyncio.run(run_isolated([client.fresh()], 8, template, CONFIG, seed=6, W_init=W0))
    np.testing.assert_allclose(fl.params, isolated.client_params[0], rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(fl.loss_log["mean"].to_numpy(),
                               isolated.loss_log["mean"].to_numpy()[[1, 3, 5, 7]], rtol=1e-9)


def test_fedavg_identity_randomized():
    rng = np.random.default_rng(2024)
    template = build_autoencoder(27, 0)
    for trial in range(200):
        size = int(rng.integers(1, 21))
        cohort = [_client(i, rng, int(rng.integers(3, 12))) for i in range(size)]
        W0 = template.flatten()
        result = asyncio.run(run_fl(cohort, W0, template, 1, 1, sgd(1.0), CONFIG, seed=trial))
        n = np.array([c.n_c for c in cohort], dtype=np.float64)
        expected = sum((n_c / n.sum()) * result.client_params[c.client_id] for n_c, c in zip(n, cohort))
        np.testing.assert_allclose(result.params, expected, rtol=1e-9, atol=1e-12)


def test_run_fl_is_deterministic_and_logs_rounds():
    template = build_autoencoder(27, 1)

    def run_once():
        rng = np.random.default_rng(5)
        cohort = [_client(i, rng, 20, adam1(0.005)) for i in range(4)]
        return asyncio.run(run_fl(cohort, template.flatten(), template, 3, 2, sgd(1.0), CONFIG, seed=42))

    first, second = run_once(), run_once()
    np.testing.assert_array_equal(first.params, second.params)
    assert list(first.loss_log["round"]) == [1, 2, 3]
    assert {"mean", "std", "min", "median", "max", "client_0", "client_3"} <= set(first.loss_log.columns)
    assert first.final_mean_loss == pytest.approx(first.loss_log["mean"].iloc[-1])


def test_local_train_resets_optimizer_unless_persistent():
    template = build_autoencoder(27, 0)
    rng = np.random.default_rng(0)
    client = _client(0, rng, 12, adam1(0.01))
    W = template.flatten()
    local_train(client, W, 1, template=template, train_config=CONFIG, seed=0)
    first_opt = client.optimizer
    local_train(client, W, 1, template=template, train_config=CONFIG, seed=0)
    assert client.optimizer is not first_opt
    assert client.epochs_done == 2
    kept = client.optimizer
    local_train(client, W, 1, template=template, train_config=CONFIG, seed=0, persistent_state=True)
    assert client.optimizer is kept
    fresh = client.fresh()
    assert fresh.epochs_done == 0 and fresh.optimizer is None and fresh.params is None


def test_select_clients_fraction():
    rng = np.random.default_rng(0)
    cohort = [_client(i, rng, 5) for i in range(4)]
    assert select_clients(cohort, 1.0, make_rng(1)) == cohort
    picked = select_clients(cohort, 0.5, make_rng(1))
    assert len(picked) == 2
    assert [c.client_id for c in picked] == sorted(c.client_id for c in picked)


def test_eval_loss_falls_back_to_train_data():
    template = build_autoencoder(27, 0)
    rng = np.random.default_rng(0)
    data = rng.uniform(size=(6, 27))
    client = ClientState(client_id=0, device_id="d", train_data=data, eval_data=np.zeros((0, 27)),
                         client_opt=sgd(0.1))
    assert eval_loss(template, template.flatten(), client) > 0.0


def test_trial_table():
    assert len(TRIALS) == 16
    assert TRIALS[1] == (OptimizerSpec(family=OptimizerFamily.SGD, lr=1e-3),
                         OptimizerSpec(family=OptimizerFamily.SGD, lr=1.0))
    assert TRIALS[6][0].family is OptimizerFamily.SGDM
    assert TRIALS[6][1] == OptimizerSpec(family=OptimizerFamily.SGDM, lr=1.0)
    assert TRIALS[11] == (OptimizerSpec(family=OptimizerFamily.ADAM1, lr=1e-3),
                          OptimizerSpec(family=OptimizerFamily.ADAM1, lr=1e-2))
    assert TRIALS[16][1] == OptimizerSpec(family=OptimizerFamily.ADAM2, lr=1e-2)
    assert all(client.lr == 1e-3 for client, _ in TRIALS.values())
    assert TUNED_PRESETS["camera"][1].lr == 1.5


def test_tune_trials_and_grid_shapes():
    template = build_autoencoder(27, 0)
    rng = np.random.default_rng(1)
    cohort = [_client(i, rng, 10) for i in range(3)]
    result = asyncio.run(tune_trials(cohort, template.flatten(), template, 2, CONFIG, seed=0, trials=[1, 9]))
    assert list(result.curves.columns) == ["round", "trial_1", "trial_9"]
    assert set(result.final) == {1, 9}
    assert result.best_trial in (1, 9)
    # 试验之间互不影响
    assert all(c.epochs_done == 0 for c in cohort)

    grid = asyncio.run(tune_grid(cohort, template.flatten(), template, 1, CONFIG, 0, OptimizerFamily.ADAM1,
                                 OptimizerFamily.SGD, [1e-3, 5e-3], [0.5, 1.0]))
    assert grid.shape == (2, 2)
    assert np.isfinite(grid.to_numpy()).all()


def test_divergent_trial_is_recorded_not_fatal(monkeypatch):
    template = build_autoencoder(27, 0)
    rng = np.random.default_rng(1)
    cohort = [_client(i, rng, 10) for i in range(2)]
    huge = OptimizerSpec(family=OptimizerFamily.SGD, lr=1e300)
    monkeypatch.setitem(TRIALS, 1, (huge, OptimizerSpec(family=OptimizerFamily.SGD, lr=1.0)))
    result = asyncio.run(tune_trials(cohort, template.flatten(), template, 3, CONFIG, seed=0, trials=[1]))
    assert result.final[1] == float("inf")
    assert result.curves["trial_1"].isna().all()


def test_fl_vs_isolated_table_budget_alignment():
    template = build_autoencoder(27, 0)
    rng = np.random.default_rng(3)
    cohort = [_client(i, rng, 12, adam1(0.005)) for i in range(3)]
    W0 = template.flatten()
    fl = asyncio.run(run_fl([c.fresh() for c in cohort], W0, template, 3, 2, sgd(1.0), CONFIG, seed=1))
    isolated = asyncio.run(run_isolated([c.fresh() for c in cohort], 6, template, CONFIG, seed=1, W_init=W0))
    table = fl_vs_isolated_table(fl.loss_log, isolated.loss_log, 2)
    assert list(table.columns) == ["round", "local_epochs", "fl_mean_eval_loss", "isolated_mean_eval_loss"]
    assert list(table["local_epochs"]) == [2, 4, 6]
    assert table["isolated_mean_eval_loss"].tolist() == isolated.loss_log["mean"].iloc[[1, 3, 5]].tolist()


# 每台设备 100 个训练包：80 行训练 / 20 行评估
LOW_DATA_FLEET = FleetSpec(train_packets=100, validation_packets=10, attack_packets=10, attacks=[])


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fl_matches_or_beats_isolated_on_low_data_cohorts(tmp_path, cohort_builder, seed):
    """每个原型的设备各自组成一个 FL 集群，E=4、R=40；孤立训练同样跑 160 个 epoch"""
    fleet = make_fleet(LOW_DATA_FLEET, seed, tmp_path / "fleet")
    cohort = cohort_builder(fleet, seed=seed)
    by_archetype = {}
    for client, entry in zip(cohort, fleet.cohort.devices):
        by_archetype.setdefault(entry.archetype, []).append(client)
    assert len(by_archetype) == 3

    for archetype, clients in by_archetype.items():
        assert all(c.n_c <= 300 for c in clients)
        template = build_autoencoder(69, derive_seed(seed, f"init/{archetype}"))
        W0 = template.flatten()
        fl = asyncio.run(run_fl([c.fresh() for c in clients], W0, template, 40, 4, sgd(1.0), CONFIG, seed,
                                client_opt=adam1(0.005), persistent_client_state=True))
        isolated = asyncio.run(run_isolated([c.fresh() for c in clients], 160, template, CONFIG, seed, W_init=W0))
        initial = np.mean([eval_loss(template, W0, c) for c in clients])
        fl_final = fl.final_mean_loss
        iso_final = float(isolated.loss_log["mean"].iloc[-1])
        assert fl_final < initial, archetype
        assert fl_final <= iso_final, f"{archetype}: FL {fl_final:.6g} > 孤立 {iso_final:.6g}"
