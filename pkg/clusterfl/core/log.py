import logging
import os

LOG_LEVEL_ENV = "CLUSTERFL_LOG_LEVEL"

logger = logging.getLogger("clusterfl")


def setup_logging(level: str = None) -> None:
    """根据环境变量配置日志输出，只应在 CLI 入口调用一次"""
    level_name = (level or os.environ.get(LOG_LEVEL_ENV, "INFO")).upper()
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s"))
        logger.addHandler(handler)
    logger.setLevel(getattr(logging, level_name, logging.INFO))
