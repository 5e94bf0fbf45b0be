import asyncio
import json
from pathlib import Path
from typing import Awaitable, Callable, Iterable, Optional, Sequence, Tuple

from pydantic import ValidationError

from .core.log import logger, setup_logging
from .core.utils import derive_seed, read_json
from .exceptions import ClusterFLError, ConfigError, NoExitArgumentParser, StageError
from .manager import CohortManager
from .models import CohortConfig, ExperimentConfig, OptimizerSpec, Scheme
from .nn import DenseNet, build_autoencoder
from .fl import TUNED_PRESETS
from .recorder import RunRecorder

# 导入所有处理器 Mixin
from .handlers.synth import SynthHandlers
from .handlers.ingest import IngestHandlers
from .handlers.fingerprint import FingerprintHandlers
from .handlers.train import TrainHandlers
from .handlers.detect import DetectHandlers
from .handlers.report import ReportHandlers
from .handlers.pipeline import PipelineHandlers

# 阶段名 -> 运行目录下的输出子目录（同名的不必列出）
STAGE_DIRS = {"featurize": "features"}


class ClusterFLApp(
    SynthHandlers,
    IngestHandlers,
    FingerprintHandlers,
    TrainHandlers,
    DetectHandlers,
    ReportHandlers,
    PipelineHandlers,
):
    """
    聚类联邦学习 IoT 异常检测的实验编排器：每个子命令对应一个处理器 Mixin。
    """
    def __init__(self, config: ExperimentConfig):
        self.config = config

        # 1. 展开配置
        self.seed = config.seed
        self.scheme: Scheme = config.scheme
        self.out_dir = Path(config.output_dir)
        self.train_config = config.train
        self.fl_config = config.fl
        self.tune_config = config.tune
        self.fp_config = config.fingerprint
        self.fleet_spec = config.fleet

        # 2. 初始化管理器
        self.recorder = RunRecorder(self.out_dir)
        self.cohort_manager = CohortManager()

        # 3. 构建子命令到处理器的映射
        self.cmd_map = {
            "synth": self.handle_synth,
            "ingest": self.handle_ingest,
            "featurize": self.handle_featurize,
            "fingerprint": self.handle_fingerprint,
            "train": self.handle_train,
            "tune": self.handle_tune,
            "detect": self.handle_detect,
            "report": self.handle_report,
            "pipeline": self.handle_pipeline,
        }

    async def dispatch(self, command: str, args) -> None:
        handler = self.cmd_map.get(command)
        if handler is None:
            raise ConfigError(f"未知子命令: {command}")
        await handler(args)

    async def run_stage(self, stage: str, fn: Callable[[], Awaitable[Iterable[Path]]], seed: Optional[int] = None) -> bool:
        """执行一个阶段并记录输出哈希；已完成且输出未变的阶段直接跳过。返回是否真正执行。"""
        await self.recorder.bind_config(self.config)
        if await self.recorder.is_stage_complete(stage):
            logger.info(f"阶段 {stage} 已完成且输出未变，跳过")
            return False
        logger.info(f"开始阶段 {stage}")
        try:
            outputs = list(await fn())
        except Exception as e:
            logger.error(f"阶段 {stage} 失败: {e}", exc_info=True)
            top = stage.split("/")[0]
            raise StageError(stage, e, self.out_dir / STAGE_DIRS.get(top, top)) from e
        await self.recorder.record_stage(stage, seed, outputs)
        return True

    # --- 各阶段共用的辅助方法 ---

    def resolve_cohort(self) -> CohortConfig:
        if self.config.cohort is not None:
            return self.config.cohort
        cohort_path = self.out_dir / "synth" / "cohort.json"
        if not cohort_path.exists():
            raise ConfigError("配置中没有 cohort，且运行目录下没有合成设备群；请先运行 synth 或在配置中给出 cohort")
        return CohortConfig.model_validate(read_json(cohort_path))

    def optimizers(self) -> Tuple[OptimizerSpec, OptimizerSpec]:
        if self.fl_config.preset:
            if self.fl_config.preset not in TUNED_PRESETS:
                raise ConfigError(f"未知的优化器预设: {self.fl_config.preset}，可选: {sorted(TUNED_PRESETS)}")
            return TUNED_PRESETS[self.fl_config.preset]
        return self.fl_config.client_opt, self.fl_config.server_opt

    def template(self) -> DenseNet:
        """所有客户端共享的初始模型 W0"""
        return build_autoencoder(self.scheme.dim, derive_seed(self.seed, "model-init"))

    def ensure_cohort_loaded(self) -> CohortManager:
        if not self.cohort_manager.device_map:
            client_opt, _ = self.optimizers()
            self.cohort_manager.refresh_cohort(self.out_dir, self.resolve_cohort().devices, client_opt, self.seed)
            if self.cohort_manager.scheme is not None and self.cohort_manager.scheme is not self.scheme:
                raise ConfigError(f"特征方案 {self.cohort_manager.scheme.value} 与配置 {self.scheme.value} 不一致，请重新 featurize")
        return self.cohort_manager


def _add_common(parser) -> None:
    # 全局选项写在子命令之前
    parser.add_argument("--config", type=Path, help="实验配置 JSON")
    parser.add_argument("--seed", type=int, help="全局种子 (u64)")
    parser.add_argument("--out", type=Path, help="运行目录")
    parser.add_argument("--scheme", choices=[s.value for s in Scheme], help="端口离散化方案")


def build_parser() -> NoExitArgumentParser:
    parser = NoExitArgumentParser(prog="clusterfl", description="聚类联邦学习 IoT 网络异常检测")
    _add_common(parser)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=NoExitArgumentParser)

    sub.add_parser("synth", help="生成合成设备群")

    p = sub.add_parser("ingest", help="读取 pcap 或记录文件，输出规范记录文件")
    p.add_argument("input", type=Path)
    p.add_argument("--device-id", help="默认取文件名")

    p = sub.add_parser("featurize", help="把设备群（或单个文件）转成特征矩阵")
    p.add_argument("input", type=Path, nargs="?")
    p.add_argument("--device-id", help="默认取文件名")

    p = sub.add_parser("fingerprint", help="模型指纹与设备聚类")
    p.add_argument("--epsilon", type=int)
    p.add_argument("--sweep", type=int, nargs="+", help="额外的 ε 扫描")

    p = sub.add_parser("train", help="按簇运行联邦训练")
    p.add_argument("--rounds", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("tune", help="ClientOpt/ServerOpt 试验表或学习率网格搜索")
    p.add_argument("--cluster", type=int, default=0)
    p.add_argument("--mode", choices=["trials", "grid"], default="trials")

    sub.add_parser("detect", help="阈值选择与逐包检测")

    p = sub.add_parser("report", help="汇总运行目录")
    p.add_argument("run_dir", type=Path, nargs="?")

    sub.add_parser("pipeline", help="完整流水线")
    return parser


def load_config(path: Optional[Path], overrides: Optional[dict] = None) -> ExperimentConfig:
    """读取 JSON 配置并应用命令行覆盖；任何校验错误都转成 ConfigError"""
    data = {}
    if path is not None:
        try:
            data = read_json(path)
        except FileNotFoundError as e:
            raise ConfigError(f"配置文件不存在: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件不是合法的 JSON: {path}: {e}") from e
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"配置校验失败:\n{e}") from e


async def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "output_dir": args.out, "scheme": args.scheme}
    config = load_config(args.config, overrides)
    app = ClusterFLApp(config)
    await app.dispatch(args.command, args)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    setup_logging()
    try:
        return asyncio.run(run(argv))
    except ClusterFLError as e:
        logger.error(str(e))
        return e.exit_code
