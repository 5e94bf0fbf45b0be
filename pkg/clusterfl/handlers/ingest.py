import asyncio
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from ..core.log import logger
from ..core.utils import write_json
from ..features import featurize, sidecar_path, write_feature_matrix
from ..ingest import read_any, write_records
from ..manager import feature_dir
from ..models import DeviceEntry, IngestStats


def _featurize_file(path: Path, out_path: Path, scheme, device_id: str, stats: IngestStats) -> List[Path]:
    matrix, sidecar = featurize(read_any(path, stats), scheme, device_id=device_id, stats=stats)
    write_feature_matrix(out_path, matrix, sidecar, scheme)
    logger.info(f"{path} -> {out_path}: {matrix.shape[0]} 行 x {matrix.shape[1]} 维")
    return [out_path, sidecar_path(out_path)]


def featurize_device(entry: DeviceEntry, run_dir: Path, scheme) -> Tuple[List[Path], IngestStats]:
    """一台设备的全部输入文件 -> features/<device_id>/*.csv"""
    stats = IngestStats()
    base = feature_dir(run_dir, entry.device_id)
    outputs = _featurize_file(entry.train, base / "train.csv", scheme, entry.device_id, stats)
    if entry.validation_normal:
        outputs += _featurize_file(entry.validation_normal, base / "validation_normal.csv", scheme,
                                   entry.device_id, stats)
    for i, path in enumerate(entry.validation_attack):
        outputs += _featurize_file(path, base / f"validation_attack_{i}.csv", scheme, entry.device_id, stats)
    if stats.kept == 0 and stats.frames > 0:
        logger.warning(f"设备 {entry.device_id} 的所有帧都被过滤掉了")
    return outputs, stats


class IngestHandlers:
    """一个 Mixin 类，包含读包 (ingest) 与特征化 (featurize) 指令。"""

    async def handle_ingest(self, args):
        """单个 pcap/记录文件 -> ingest/<device_id>.jsonl，附带过滤统计"""
        path = Path(args.input)
        device_id = args.device_id or path.stem
        out_path = self.out_dir / "ingest" / f"{device_id}.jsonl"
        stats_path = self.out_dir / "ingest" / f"{device_id}.stats.json"

        async def stage():
            stats = IngestStats()
            count = await asyncio.to_thread(lambda: write_records(read_any(path, stats), out_path))
            write_json(stats_path, stats.model_dump(mode="json"))
            logger.info(f"已读取 {path}: {stats.frames} 帧，保留 {count} 个 IPv4 包")
            return [out_path, stats_path]

        await self.run_stage(f"ingest/{device_id}", stage)

    async def handle_featurize(self, args=None):
        single: Optional[Path] = getattr(args, "input", None) if args is not None else None
        if single is not None:
            await self._featurize_single(Path(single), args.device_id or Path(single).stem)
            return

        cohort = self.resolve_cohort()

        async def stage():
            results = await asyncio.gather(*[
                asyncio.to_thread(featurize_device, entry, self.out_dir, self.scheme)
                for entry in cohort.devices
            ])
            outputs: List[Path] = []
            per_device: Dict[str, dict] = {}
            total = IngestStats()
            for entry, (paths, stats) in zip(cohort.devices, results):
                outputs += paths
                per_device[entry.device_id] = stats.model_dump(mode="json")
                total.merge(stats)
            stats_path = self.out_dir / "features" / "ingest_stats.json"
            write_json(stats_path, {"devices": per_device, "total": total.model_dump(mode="json"),
                                    "scheme": self.scheme.value})
            logger.info(f"特征化完成：{len(cohort.devices)} 台设备，共保留 {total.kept} 个包，"
                        f"乱序 {total.out_of_order}，损坏 {total.malformed}")
            return outputs + [stats_path]

        await self.run_stage("featurize", stage)
        # 特征已变化，下次使用时重新载入
        self.cohort_manager.device_map = {}

    async def _featurize_single(self, path: Path, device_id: str):
        out_path = feature_dir(self.out_dir, device_id) / f"{path.stem}.csv"

        async def stage():
            stats = IngestStats()
            outputs = await asyncio.to_thread(_featurize_file, path, out_path, self.scheme, device_id, stats)
            return outputs

        await self.run_stage(f"featurize/{device_id}/{path.stem}", stage)
