import asyncio
import hashlib
import json
from importlib import metadata
from pathlib import Path
from typing import Dict, Iterable, Optional, Union

from pydantic import ValidationError

from .core.log import logger
from .core.utils import file_sha256, read_json, write_json
from .models import ExperimentConfig, RunManifest, StageRecord

MANIFEST_NAME = "manifest.json"
TRACKED_PACKAGES = ("clusterfl", "numpy", "pandas", "scikit-learn", "dpkt", "pydantic")


def package_versions() -> Dict[str, str]:
    versions = {}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def config_hash(config: ExperimentConfig) -> str:
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(payload.encode()).hexdigest()


class RunRecorder:
    """负责运行目录下 manifest.json 的读写（懒加载，asyncio.Lock 保护）。

    清单只记录版本、配置哈希、各阶段种子与输出文件的 sha256，不含任何时间戳，
    因此同一配置重跑得到的清单逐字节相同。
    """

    def __init__(self, run_dir: Union[str, Path]):
        self.run_dir = Path(run_dir)
        self.manifest_path = self.run_dir / MANIFEST_NAME
        self._manifest: Optional[RunManifest] = None
        self._lock = asyncio.Lock()
        self._initialized = False

    async def _initialize(self):
        manifest = RunManifest()
        if self.manifest_path.exists():
            try:
                manifest = RunManifest.model_validate(read_json(self.manifest_path))
            except (ValidationError, json.JSONDecodeError) as e:
                logger.warning(f"运行清单 {self.manifest_path} 无法解析，将重新记录: {e}")
        manifest.versions = package_versions()
        self._manifest = manifest
        self._initialized = True

    async def _ensure_initialized(self):
        if not self._initialized:
            async with self._lock:
                if not self._initialized:
                    await self._initialize()

    async def bind_config(self, config: ExperimentConfig) -> None:
        """配置哈希变化时作废全部已完成阶段"""
        await self._ensure_initialized()
        digest = config_hash(config)
        async with self._lock:
            if self._manifest.config_hash and self._manifest.config_hash != digest and self._manifest.stages:
                logger.info("配置已变化，之前完成的阶段全部作废")
                self._manifest.stages = {}
            self._manifest.config_hash = digest
            self._flush()

    async def is_stage_complete(self, stage: str) -> bool:
        await self._ensure_initialized()
        record = self._manifest.stages.get(stage)
        if record is None or not record.outputs:
            return False
        for rel_path, digest in record.outputs.items():
            path = self.run_dir / rel_path
            if not path.exists() or file_sha256(path) != digest:
                return False
        return True

    async def record_stage(self, stage: str, seed: Optional[int], outputs: Iterable[Path]) -> StageRecord:
        await self._ensure_initialized()
        hashes = {}
        for path in sorted(Path(p) for p in outputs):
            rel = path.resolve().relative_to(self.run_dir.resolve()).as_posix()
            hashes[rel] = file_sha256(path)
        record = StageRecord(seed=seed, outputs=hashes)
        async with self._lock:
            self._manifest.stages[stage] = record
            self._flush()
        logger.info(f"阶段 {stage} 已记录 {len(hashes)} 个输出文件")
        return record

    async def manifest(self) -> RunManifest:
        await self._ensure_initialized()
        return self._manifest.model_copy(deep=True)

    def _flush(self) -> None:
        write_json(self.manifest_path, self._manifest.model_dump(mode="json"))
