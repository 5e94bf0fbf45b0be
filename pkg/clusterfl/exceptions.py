from argparse import ArgumentParser
from pathlib import Path
from typing import Optional


class ClusterFLError(Exception):
    """所有可预期错误的基类，exit_code 即 CLI 退出码"""
    exit_code = 1


class ConfigError(ClusterFLError):
    """配置错误：缺失路径、非法取值"""
    exit_code = 1


class ArgParseError(ConfigError):
    """参数解析错误"""
    pass


class DataError(ClusterFLError):
    """输入数据错误"""
    exit_code = 2


class PcapFormatError(DataError):
    """pcap 全局头损坏，整个文件无法读取"""
    pass


class DegenerateFingerprintError(DataError):
    """所有模型指纹完全相同，无法做 PCA / 聚类"""
    pass


class NumericError(ClusterFLError):
    """训练发散：参数出现 NaN/Inf"""
    exit_code = 3


class StageError(ClusterFLError):
    """流水线某个阶段失败，记录阶段名与已产生的部分输出"""

    def __init__(self, stage: str, cause: BaseException, partial_dir: Optional[Path] = None):
        self.stage = stage
        self.cause = cause
        self.partial_dir = partial_dir
        self.exit_code = getattr(cause, "exit_code", 1)
        where = f"，部分输出位于 {partial_dir}" if partial_dir else ""
        super().__init__(f"阶段 {stage} 失败: {cause}{where}")


class NoExitArgumentParser(ArgumentParser):
    """一个在解析出错时会抛出 ArgParseError 异常而不是直接退出的解析器"""
    def error(self, message: str):
        raise ArgParseError(message)
