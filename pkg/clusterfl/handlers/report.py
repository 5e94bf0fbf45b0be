import asyncio
import shutil
from pathlib import Path
from typing import List, Optional

import pandas as pd

from ..core.log import logger
from ..core.utils import read_json, write_json
from ..exceptions import DataError
from ..recorder import MANIFEST_NAME


def _read_optional(path: Path):
    return read_json(path) if path.exists() else None


def _concat_cluster_csvs(run_dir: Path, name: str) -> Optional[pd.DataFrame]:
    frames = []
    for path in sorted((run_dir / "train").glob(f"cluster_*/{name}")):
        frame = pd.read_csv(path)
        frame.insert(0, "cluster", int(path.parent.name.split("_")[1]))
        frames.append(frame)
    if not frames:
        return None
    return pd.concat(frames, ignore_index=True).sort_values(["cluster", frames[0].columns[1]], kind="stable")


def build_run_report(run_dir: Path) -> List[Path]:
    """汇总一个运行目录的各阶段输出到 report/；只搬运已有数值，不重新计算"""
    run_dir = Path(run_dir)
    stage_dirs = [run_dir / d for d in ("fingerprint", "train", "detect", "tune")]
    if not any(d.exists() for d in stage_dirs):
        raise DataError(f"{run_dir} 中没有任何阶段输出，无法生成报告")
    out = run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    outputs: List[Path] = []

    manifest = _read_optional(run_dir / MANIFEST_NAME) or {}
    clusters = _read_optional(run_dir / "fingerprint" / "cluster_report.json")
    training = _read_optional(run_dir / "train" / "clusters.json")
    detection = _read_optional(run_dir / "detect" / "summary.json")
    tuning = {
        path.parent.name: read_json(path)
        for path in sorted((run_dir / "tune").glob("cluster_*/tune_summary.json"))
    }

    summary = {
        "versions": manifest.get("versions", {}),
        "config_hash": manifest.get("config_hash", ""),
        "clustering": None if clusters is None else {
            "k": clusters["k"],
            "epsilon": clusters.get("epsilon"),
            "selection": clusters["selection"],
            "assignments": dict(zip(clusters["device_ids"], clusters["labels"])),
            "n_components": clusters.get("n_components"),
            "external": clusters.get("external"),
        },
        "training": training,
        "tuning": tuning or None,
        "detection": None if detection is None else {
            device_id: {
                "cluster": entry["cluster"],
                "threshold": entry["threshold"],
                "metrics": {name: rep["metrics"] for name, rep in entry["datasets"].items()},
                "recall_by_kind": {name: rep["recall_by_kind"] for name, rep in entry["datasets"].items()
                                   if rep["recall_by_kind"]},
            }
            for device_id, entry in detection.items()
        },
    }
    summary_path = out / "summary.json"
    write_json(summary_path, summary)
    outputs.append(summary_path)

    for name in ("round_loss.csv", "fl_vs_isolated.csv"):
        frame = _concat_cluster_csvs(run_dir, name)
        if frame is not None:
            frame.to_csv(out / name, index=False, float_format="%.17g")
            outputs.append(out / name)

    for src in [run_dir / "fingerprint" / "k_scores.csv", run_dir / "fingerprint" / "epsilon_sweep.csv"]:
        if src.exists():
            shutil.copyfile(src, out / src.name)
            outputs.append(out / src.name)

    # 时间-MSE 散点图数据
    for src in sorted((run_dir / "detect").glob("*/scores_*.csv")):
        dst = out / f"scores_{src.parent.name}_{src.stem[len('scores_'):]}.csv"
        shutil.copyfile(src, dst)
        outputs.append(dst)

    logger.info(f"报告已写入 {out}，共 {len(outputs)} 个文件")
    return outputs


class ReportHandlers:
    """一个 Mixin 类，负责把运行目录汇总成报告。"""

    async def handle_report(self, args=None):
        run_dir = getattr(args, "run_dir", None)
        if run_dir is not None and Path(run_dir).resolve() != self.out_dir.resolve():
            # 外部运行目录只读汇总，不写入当前运行的清单
            await asyncio.to_thread(build_run_report, Path(run_dir))
            return

        async def stage():
            return await asyncio.to_thread(build_run_report, self.out_dir)

        await self.run_stage("report", stage)
