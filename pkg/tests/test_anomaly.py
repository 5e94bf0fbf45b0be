import asyncio

import numpy as np
import pytest

from clusterfl.anomaly import build_report, metrics, score_and_classify, score_table, select_threshold
from clusterfl.core.utils import derive_seed
from clusterfl.exceptions import DataError
from clusterfl.features import featurize
from clusterfl.fl import ClientState, run_fl
from clusterfl.ingest import read_records
from clusterfl.manager import split_train_eval
from clusterfl.models import ConfusionCounts, FleetSpec, Scheme, TrainConfig
from clusterfl.nn import adam1, build_autoencoder, reconstruction_errors, sgd
from clusterfl.synth import make_fleet


@pytest.mark.parametrize("counts, expected", [
    ((25828, 5277, 0, 1177), (0.8365, 0.9073, 0.3891)),
    ((6743222, 66190, 0, 1200), (0.9903, 0.9951, 0.1328)),
])
def test_metrics_reference_values(counts, expected):
    tp, fn, fp, tn = counts
    m = metrics(ConfusionCounts(tp=tp, fn=fn, fp=fp, tn=tn))
    assert (m.accuracy, m.f1, m.mcc) == pytest.approx(expected, abs=1e-4)
    assert not m.f1_degenerate and not m.mcc_degenerate


def test_metrics_degenerate_cases():
    only_negatives = metrics(ConfusionCounts(tn=10))
    assert only_negatives.accuracy == 1.0
    assert only_negatives.f1 == 0.0 and only_negatives.f1_degenerate
    assert only_negatives.mcc == 0.0 and only_negatives.mcc_degenerate

    all_flagged = metrics(ConfusionCounts(tp=5, fp=5))
    assert all_flagged.f1 == pytest.approx(10 / 15)
    assert all_flagged.mcc_degenerate

    with pytest.raises(DataError):
        metrics(ConfusionCounts())


@pytest.mark.parametrize("scale", [2, 7, 1000])
def test_metrics_are_unchanged_by_scaling_counts(scale):
    base = ConfusionCounts(tp=40, fn=7, fp=3, tn=120)
    scaled = ConfusionCounts(tp=40 * scale, fn=7 * scale, fp=3 * scale, tn=120 * scale)
    a, b = metrics(base), metrics(scaled)
    assert (b.accuracy, b.f1, b.mcc) == pytest.approx((a.accuracy, a.f1, a.mcc), rel=1e-12)


def test_metrics_stay_in_range_on_random_counts():
    rng = np.random.default_rng(3)
    for _ in range(500):
        tp, fn, fp, tn = (int(v) for v in rng.integers(0, 50, size=4))
        if tp + fn + fp + tn == 0:
            continue
        m = metrics(ConfusionCounts(tp=tp, fn=fn, fp=fp, tn=tn))
        assert 0.0 <= m.accuracy <= 1.0
        assert 0.0 <= m.f1 <= 1.0
        assert -1.0 <= m.mcc <= 1.0


def test_threshold_leaves_validation_set_clean(random_rows):
    net = build_autoencoder(27, 4)
    normal = random_rows(50, seed=1)
    record = select_threshold(net, normal, device_id="cam")
    errors = reconstruction_errors(net, normal)
    assert record.threshold == errors.max()
    assert record.max_index == int(np.argmax(errors))
    assert record.source == "validation_normal"
    verdicts = score_and_classify(net, normal, record.threshold)
    assert not any(anomalous for _, anomalous in verdicts)
    # MSE 恰好等于阈值判为正常
    assert verdicts[record.max_index] == (record.threshold, False)


def test_threshold_requires_rows():
    with pytest.raises(DataError):
        select_threshold(build_autoencoder(27, 0), np.zeros((0, 27)))
    assert score_and_classify(build_autoencoder(27, 0), np.zeros((0, 27)), 1.0) == []


def test_outliers_are_flagged(random_rows):
    net = build_autoencoder(27, 4)
    threshold = select_threshold(net, random_rows(40, seed=2) * 0.1).threshold
    far = np.full((3, 27), 50.0)
    assert all(anomalous for _, anomalous in score_and_classify(net, far, threshold))


def test_build_report_counts_and_recall_by_kind():
    scored = [(0.1, False), (0.9, True), (0.8, True), (0.2, False), (0.7, True), (0.05, False)]
    labels = ["normal", "attack", "attack", "attack", "normal", "unlabeled"]
    kinds = [None, "SynFlood", "UdpFlood", "UdpFlood", None, None]
    report = build_report("dev", "validation_attack_0", 0.5, scored, labels, timestamps=[1, 2, 3, 4, 5, 6],
                          attack_kinds=kinds)
    assert report.counts == ConfusionCounts(tp=2, fn=1, fp=1, tn=1)
    assert report.skipped_unlabeled == 1
    assert report.fp_rate == pytest.approx(0.5)
    assert report.recall_by_kind == {"SynFlood": 1.0, "UdpFlood": 0.5}
    assert report.metrics.accuracy == pytest.approx(3 / 5)
    assert "packets" not in report.model_dump()

    table = score_table(report)
    assert list(table.columns) == ["timestamp", "mse", "anomalous", "label", "attack_kind"]
    assert len(table) == 6
    assert table["attack_kind"].tolist()[:3] == ["", "SynFlood", "UdpFlood"]


def test_unlabeled_dataset_has_no_metrics():
    report = build_report("dev", "capture", 1.0, [(0.5, False), (2.0, True)], ["unlabeled", "unlabeled"])
    assert report.metrics is None
    assert report.fp_rate is None
    assert report.skipped_unlabeled == 2


def test_build_report_rejects_length_mismatch():
    with pytest.raises(DataError):
        build_report("dev", "x", 1.0, [(0.1, False)], [])


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_scan_and_flood_are_separable_on_synthetic_fleet(tmp_path, seed):
    """按原型分簇联邦训练后，扫描与洪泛几乎全部检出，C&C 心跳至少检出一半"""
    fleet = make_fleet(FleetSpec(), seed, tmp_path / "fleet")
    by_archetype = {}
    for client_id, entry in enumerate(fleet.cohort.devices):
        by_archetype.setdefault(entry.archetype, []).append((client_id, entry))

    for archetype, members in by_archetype.items():
        clients = []
        for client_id, entry in members:
            matrix, _ = featurize(read_records(entry.train), Scheme.HIERARCHICAL, entry.device_id)
            train, evaluation = split_train_eval(matrix, derive_seed(seed, f"split/{entry.device_id}"))
            clients.append(ClientState(client_id=client_id, device_id=entry.device_id, train_data=train,
                                       eval_data=evaluation, client_opt=adam1(0.005)))
        template = build_autoencoder(69, seed)
        result = asyncio.run(run_fl(clients, template.flatten(), template, 30, 2, sgd(0.75), TrainConfig(), seed,
                                    client_opt=adam1(0.005)))
        net = template.copy_with(result.params)

        for _, entry in members:
            normal, _ = featurize(read_records(entry.validation_normal), Scheme.HIERARCHICAL, entry.device_id)
            threshold = select_threshold(net, normal, entry.device_id).threshold
            rows, sidecar = featurize(read_records(entry.validation_attack[0]), Scheme.HIERARCHICAL, entry.device_id)
            report = build_report(entry.device_id, "validation_attack_0", threshold,
                                  score_and_classify(net, rows, threshold), sidecar["label"].tolist(),
                                  sidecar["timestamp"].tolist(), sidecar["attack_kind"].tolist())
            where = f"{archetype}/{entry.device_id}"
            assert report.recall_by_kind["TelnetScan"] >= 0.95, where
            assert report.recall_by_kind["UdpFlood"] >= 0.95, where
            assert report.recall_by_kind["CncHeartbeat"] >= 0.5, where
            assert report.fp_rate <= 0.01, where
