"""阈值选择、逐包打分与混淆矩阵指标。攻击为正类。"""
import math
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from .exceptions import DataError
from .models import ConfusionCounts, DetectionMetrics, DetectionReport, Label, PacketVerdict, ThresholdRecord
from .nn import DenseNet, reconstruction_errors


def select_threshold(net: DenseNet, rows: np.ndarray, device_id: str = "", source: str = "validation_normal") -> ThresholdRecord:
    """阈值 = 验证正常集上最大的重构 MSE，因此该数据集本身不会产生误报"""
    if rows.shape[0] == 0:
        raise DataError(f"设备 {device_id} 的 validation-normal 数据为空，无法确定阈值")
    errors = reconstruction_errors(net, rows)
    index = int(np.argmax(errors))
    return ThresholdRecord(device_id=device_id, threshold=float(errors[index]), source=source, max_index=index)


def score_and_classify(net: DenseNet, rows: np.ndarray, threshold: float) -> List[tuple]:
    """返回 (mse, 是否异常) 列表，顺序与输入一致。MSE 恰好等于阈值时判为正常。"""
    if rows.shape[0] == 0:
        return []
    errors = reconstruction_errors(net, rows)
    return [(float(e), bool(e > threshold)) for e in errors]


def metrics(c: ConfusionCounts) -> DetectionMetrics:
    if c.total == 0:
        raise DataError("混淆矩阵为空，无法计算指标")
    accuracy = (c.tp + c.tn) / c.total
    f1_denom = 2 * c.tp + c.fp + c.fn
    f1 = 2 * c.tp / f1_denom if f1_denom else 0.0
    # 用 Python 整数相乘，避免大计数时 float 溢出精度
    mcc_product = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    mcc = (c.tp * c.tn - c.fp * c.fn) / math.sqrt(mcc_product) if mcc_product else 0.0
    return DetectionMetrics(accuracy=accuracy, f1=f1, mcc=mcc,
                            f1_degenerate=f1_denom == 0, mcc_degenerate=mcc_product == 0)


def build_report(
    device_id: str,
    dataset: str,
    threshold: float,
    scored: Sequence[tuple],
    labels: Sequence[str],
    timestamps: Optional[Sequence[float]] = None,
    attack_kinds: Optional[Sequence[Optional[str]]] = None,
) -> DetectionReport:
    """按真值标签统计混淆矩阵。unlabeled 行不计入，只计数。"""
    if len(scored) != len(labels):
        raise DataError(f"打分结果 ({len(scored)}) 与标签 ({len(labels)}) 数量不一致")
    timestamps = timestamps if timestamps is not None else [0.0] * len(scored)
    attack_kinds = attack_kinds if attack_kinds is not None else [None] * len(scored)

    counts = ConfusionCounts()
    skipped = 0
    per_kind_total, per_kind_hit = {}, {}
    packets = []
    for (mse_value, anomalous), label, ts, kind in zip(scored, labels, timestamps, attack_kinds):
        label = Label(label)
        kind = kind or None
        packets.append(PacketVerdict(timestamp=float(ts), mse=mse_value, anomalous=anomalous, label=label, attack_kind=kind))
        if label is Label.UNLABELED:
            skipped += 1
        elif label is Label.ATTACK:
            if anomalous:
                counts.tp += 1
            else:
                counts.fn += 1
            key = kind or "unknown"
            per_kind_total[key] = per_kind_total.get(key, 0) + 1
            per_kind_hit[key] = per_kind_hit.get(key, 0) + int(anomalous)
        elif anomalous:
            counts.fp += 1
        else:
            counts.tn += 1

    negatives = counts.fp + counts.tn
    return DetectionReport(
        device_id=device_id,
        dataset=dataset,
        threshold=threshold,
        counts=counts,
        metrics=metrics(counts) if counts.total else None,
        fp_rate=counts.fp / negatives if negatives else None,
        recall_by_kind={k: per_kind_hit[k] / per_kind_total[k] for k in sorted(per_kind_total)},
        skipped_unlabeled=skipped,
        packets=packets,
    )


def score_table(report: DetectionReport) -> pd.DataFrame:
    """逐包打分表，用于画 时间-MSE 散点图"""
    return pd.DataFrame(
        [(p.timestamp, p.mse, p.anomalous, p.label.value, p.attack_kind or "") for p in report.packets],
        columns=["timestamp", "mse", "anomalous", "label", "attack_kind"],
    )
