from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .core.log import logger
from .core.utils import derive_seed, make_rng
from .exceptions import DataError
from .features import read_feature_matrix
from .fl import ClientState
from .models import DeviceEntry, OptimizerSpec, Scheme

EVAL_FRACTION = 0.2


@dataclass
class DeviceFeatures:
    """一台设备在 features/ 目录下的全部特征矩阵及其标签边车"""
    device_id: str
    train: np.ndarray
    validation_normal: Optional[tuple] = None
    validation_attack: Dict[str, tuple] = field(default_factory=dict)


def feature_dir(run_dir: Path, device_id: str) -> Path:
    return Path(run_dir) / "features" / device_id


def split_train_eval(X: np.ndarray, seed: int) -> tuple:
    """一次性的 80/20 划分；至少 2 行时评估集至少 1 行"""
    n = X.shape[0]
    n_eval = max(1, int(round(EVAL_FRACTION * n))) if n >= 2 else 0
    order = make_rng(seed).permutation(n)
    eval_idx, train_idx = np.sort(order[:n_eval]), np.sort(order[n_eval:])
    return X[train_idx], X[eval_idx]


class CohortManager:
    """负责管理内存中的设备群：device_id -> ClientState，以及真值原型标签"""

    def __init__(self):
        self.device_map: Dict[str, ClientState] = {}
        self.features: Dict[str, DeviceFeatures] = {}
        self.archetypes: Dict[str, Optional[str]] = {}
        self.scheme: Optional[Scheme] = None

    def refresh_cohort(self, run_dir: Path, devices: Sequence[DeviceEntry], client_opt: OptimizerSpec,
                       seed: int) -> int:
        """从 features/ 读取每台设备的矩阵并重建客户端。先写临时字典，全部成功后一次性替换。"""
        logger.info(f"CohortManager: 正在载入 {len(devices)} 台设备的特征...")
        device_map_temp: Dict[str, ClientState] = {}
        features_temp: Dict[str, DeviceFeatures] = {}
        archetypes_temp: Dict[str, Optional[str]] = {}
        schemes = set()

        for client_id, entry in enumerate(devices):
            base = feature_dir(run_dir, entry.device_id)
            if not (base / "train.csv").exists():
                raise DataError(f"找不到设备 {entry.device_id} 的特征矩阵 {base / 'train.csv'}，请先运行 featurize")
            train, _, scheme = read_feature_matrix(base / "train.csv")
            schemes.add(scheme)
            if train.shape[0] == 0:
                raise DataError(f"设备 {entry.device_id} 没有训练数据")
            feats = DeviceFeatures(device_id=entry.device_id, train=train)
            if (base / "validation_normal.csv").exists():
                matrix, sidecar, _ = read_feature_matrix(base / "validation_normal.csv")
                feats.validation_normal = (matrix, sidecar)
            for path in sorted(base.glob("validation_attack_*.csv")):
                if path.name.endswith(".labels.csv"):
                    continue
                matrix, sidecar, _ = read_feature_matrix(path)
                feats.validation_attack[path.stem] = (matrix, sidecar)

            train_part, eval_part = split_train_eval(train, derive_seed(seed, f"split/{entry.device_id}"))
            device_map_temp[entry.device_id] = ClientState(
                client_id=client_id, device_id=entry.device_id,
                train_data=train_part, eval_data=eval_part, client_opt=client_opt,
            )
            features_temp[entry.device_id] = feats
            archetypes_temp[entry.device_id] = entry.archetype

        if len(schemes) > 1:
            raise DataError(f"设备群的特征方案不一致: {sorted(s.value for s in schemes)}")

        self.device_map = device_map_temp
        self.features = features_temp
        self.archetypes = archetypes_temp
        self.scheme = schemes.pop() if schemes else None
        logger.info(f"成功缓存 {len(self.device_map)} 个客户端 (方案 {self.scheme.value if self.scheme else '-'})")
        return len(self.device_map)

    def find_client(self, device_id: str) -> Optional[ClientState]:
        return self.device_map.get(device_id)

    def clients(self, device_ids: Optional[Sequence[str]] = None) -> List[ClientState]:
        """按 client_id 升序返回客户端"""
        ids = device_ids if device_ids is not None else list(self.device_map)
        missing = [d for d in ids if d not in self.device_map]
        if missing:
            raise DataError(f"未知设备: {missing}")
        return sorted((self.device_map[d] for d in ids), key=lambda c: c.client_id)

    def ground_truth(self) -> Optional[List[str]]:
        """所有设备都标注了原型时才返回真值，只用于外部评估"""
        clients = self.clients()
        labels = [self.archetypes.get(c.device_id) for c in clients]
        if not labels or any(label is None for label in labels):
            return None
        return labels

    def labels_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(c.client_id, c.device_id, self.archetypes.get(c.device_id) or "", c.n_c, c.eval_data.shape[0])
             for c in self.clients()],
            columns=["client_id", "device_id", "archetype", "n_train", "n_eval"],
        )
