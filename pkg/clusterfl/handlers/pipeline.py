from ..core.log import logger
from ..exceptions import ConfigError


class PipelineHandlers:
    """一个 Mixin 类，按顺序执行完整流水线：synth -> featurize -> fingerprint -> train -> detect -> report。"""

    async def handle_pipeline(self, args=None):
        # 先检查所有输入路径，避免跑到一半才失败
        missing = self.config.missing_paths()
        if missing:
            raise ConfigError("以下输入文件不存在:\n" + "\n".join(str(p) for p in missing))

        if self.config.cohort is None:
            await self.handle_synth(args)
        else:
            logger.info(f"使用配置中的设备群 ({len(self.config.cohort.devices)} 台)，跳过 synth")
        await self.handle_featurize(None)
        await self.handle_fingerprint(None)
        await self.handle_train(None)
        await self.handle_detect(None)
        await self.handle_report(None)
        logger.info(f"流水线完成，输出位于 {self.out_dir}")
