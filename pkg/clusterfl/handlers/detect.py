import asyncio
from typing import Dict, List

from ..core.log import logger
from ..core.utils import write_json
from ..anomaly import build_report, score_and_classify, score_table, select_threshold
from ..exceptions import DataError
from ..nn import DenseNet, load_checkpoint


def detect_device(net: DenseNet, device_id: str, feats, out_dir) -> dict:
    """单台设备：validation-normal 定阈值，然后对每个数据集逐包判定"""
    if feats.validation_normal is None:
        raise DataError(f"设备 {device_id} 没有 validation-normal 数据，无法确定阈值")
    normal_rows, normal_side = feats.validation_normal
    threshold = select_threshold(net, normal_rows, device_id)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = [out_dir / "threshold.json"]
    write_json(outputs[0], threshold.model_dump(mode="json"))

    datasets = {"validation_normal": (normal_rows, normal_side), **feats.validation_attack}
    reports = {}
    for name, (rows, sidecar) in datasets.items():
        scored = score_and_classify(net, rows, threshold.threshold)
        report = build_report(device_id, name, threshold.threshold, scored, sidecar["label"].tolist(),
                              sidecar["timestamp"].tolist(), sidecar["attack_kind"].tolist())
        report_path, scores_path = out_dir / f"report_{name}.json", out_dir / f"scores_{name}.csv"
        write_json(report_path, report.model_dump(mode="json"))
        score_table(report).to_csv(scores_path, index=False, float_format="%.17g")
        outputs += [report_path, scores_path]
        reports[name] = report
        m = report.metrics
        if m is None:
            logger.info(f"{device_id}/{name}: 全部 {report.skipped_unlabeled} 个包无标签，只输出打分")
            continue
        logger.info(f"{device_id}/{name}: acc={m.accuracy:.4f} f1={m.f1:.4f} mcc={m.mcc:.4f} "
                    f"(TP={report.counts.tp} FN={report.counts.fn} FP={report.counts.fp} TN={report.counts.tn})")
    return {"threshold": threshold, "reports": reports, "outputs": outputs}


class DetectHandlers:
    """一个 Mixin 类，使用每个簇的全局模型对簇内设备做逐包异常检测。"""

    def load_cluster_models(self, k: int) -> Dict[int, DenseNet]:
        models = {}
        for cluster in range(k):
            path = self.out_dir / "train" / f"cluster_{cluster}" / "model.ckpt"
            if not path.exists():
                raise DataError(f"找不到簇 {cluster} 的模型 {path}，请先运行 train")
            net, scheme = load_checkpoint(path)
            if scheme is not self.scheme:
                raise DataError(f"{path} 的特征方案 {scheme.value} 与配置 {self.scheme.value} 不一致")
            models[cluster] = net
        return models

    async def handle_detect(self, args=None):
        manager = self.ensure_cohort_loaded()
        assignment = self.load_assignment()

        async def stage():
            models = self.load_cluster_models(assignment.k)
            device_ids = assignment.device_ids
            results = await asyncio.gather(*[
                asyncio.to_thread(detect_device, models[assignment.labels[i]], device_id,
                                  manager.features[device_id], self.out_dir / "detect" / device_id)
                for i, device_id in enumerate(device_ids)
            ])
            outputs: List = [p for r in results for p in r["outputs"]]
            summary = {
                device_id: {
                    "cluster": assignment.labels[i],
                    "threshold": r["threshold"].threshold,
                    "datasets": {name: rep.model_dump(mode="json") for name, rep in r["reports"].items()},
                }
                for i, (device_id, r) in enumerate(zip(device_ids, results))
            }
            summary_path = self.out_dir / "detect" / "summary.json"
            write_json(summary_path, summary)
            return outputs + [summary_path]

        await self.run_stage("detect", stage)
