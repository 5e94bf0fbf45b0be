from pathlib import Path
from typing import Tuple

import numpy as np
import pandas as pd

from ..core.log import logger
from ..core.utils import derive_seed, read_json, write_json
from ..exceptions import DataError
from ..fingerprint import FingerprintMatrix, collect_fingerprints, fingerprint_epsilon_sweep, model_fingerprinting
from ..models import ClusterAssignment


def fingerprint_frame(matrix: FingerprintMatrix) -> pd.DataFrame:
    frame = pd.DataFrame(matrix.rows, columns=[f"w{i}" for i in range(matrix.rows.shape[1])])
    frame.insert(0, "device_id", matrix.device_ids)
    frame.insert(0, "client_id", matrix.client_ids)
    return frame


def k_scores_frame(assignment: ClusterAssignment) -> pd.DataFrame:
    frame = pd.DataFrame([s.model_dump() for s in assignment.scores])
    if not assignment.external_by_k:
        return frame
    for metric in ("ari", "ami", "v_measure"):
        frame[metric] = [assignment.external_by_k.get(k, {}).get(metric, np.nan) for k in frame["k"]]
    return frame


class FingerprintHandlers:
    """一个 Mixin 类，负责模型指纹、PCA 与 K 的选择。"""

    @property
    def fingerprint_dir(self) -> Path:
        return self.out_dir / "fingerprint"

    def _apply_fingerprint_overrides(self, args) -> None:
        update = {}
        if getattr(args, "epsilon", None) is not None:
            update["epsilon"] = args.epsilon
        if getattr(args, "sweep", None):
            update["epsilon_sweep"] = list(args.sweep)
        if update:
            self.fp_config = self.fp_config.model_validate({**self.fp_config.model_dump(), **update})
            self.config = self.config.model_copy(update={"fingerprint": self.fp_config})

    async def handle_fingerprint(self, args=None):
        self._apply_fingerprint_overrides(args)
        manager = self.ensure_cohort_loaded()
        cohort = manager.clients()
        if len(cohort) < 3:
            raise DataError(f"至少需要 3 台设备才能聚类，当前只有 {len(cohort)} 台")
        out = self.fingerprint_dir

        async def stage():
            template = self.template()
            W0 = template.flatten()
            seed = derive_seed(self.seed, "fingerprint")
            truth = manager.ground_truth()
            matrix = await collect_fingerprints(cohort, W0, self.fp_config.epsilon, template, self.train_config, seed)
            assignment = model_fingerprinting(matrix, self.fp_config, self.seed, truth)

            out.mkdir(parents=True, exist_ok=True)
            outputs = [out / "cluster_report.json", out / "fingerprints.csv", out / "k_scores.csv"]
            write_json(outputs[0], assignment.model_dump(mode="json"))
            fingerprint_frame(matrix).to_csv(outputs[1], index=False, float_format="%.17g")
            k_scores_frame(assignment).to_csv(outputs[2], index=False, float_format="%.17g")

            for cluster in range(assignment.k):
                members = [assignment.device_ids[i] for i in assignment.members(cluster)]
                logger.info(f"簇 {cluster}: {', '.join(members)}")
            if assignment.external:
                logger.info(f"外部指标 (仅报告): {assignment.external}")

            if self.fp_config.epsilon_sweep:
                sweep, _ = await fingerprint_epsilon_sweep(cohort, W0, self.fp_config.epsilon_sweep, template,
                                                           self.train_config, self.fp_config, seed, truth)
                sweep_path = out / "epsilon_sweep.csv"
                sweep.to_csv(sweep_path, index=False, float_format="%.17g")
                outputs.append(sweep_path)
            return outputs

        await self.run_stage("fingerprint", stage, seed=derive_seed(self.seed, "fingerprint"))

    def load_assignment(self) -> ClusterAssignment:
        path = self.fingerprint_dir / "cluster_report.json"
        if not path.exists():
            raise DataError(f"找不到聚类结果 {path}，请先运行 fingerprint")
        return ClusterAssignment.model_validate(read_json(path))

    def load_fingerprint_rows(self) -> Tuple[np.ndarray, list]:
        """返回 (指纹矩阵, device_id 列表)，行序按 client_id 升序"""
        frame = pd.read_csv(self.fingerprint_dir / "fingerprints.csv", dtype={"device_id": str})
        frame = frame.sort_values("client_id")
        weights = frame.drop(columns=["client_id", "device_id"]).to_numpy(dtype=np.float64)
        return weights, frame["device_id"].tolist()
