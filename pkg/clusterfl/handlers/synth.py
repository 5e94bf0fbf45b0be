import asyncio

from ..core.log import logger
from ..core.utils import derive_seed, write_json
from ..synth import make_fleet


class SynthHandlers:
    """一个 Mixin 类，负责合成设备群。"""

    async def handle_synth(self, args=None):
        synth_dir = self.out_dir / "synth"

        async def stage():
            result = await asyncio.to_thread(make_fleet, self.fleet_spec, derive_seed(self.seed, "synth"), synth_dir)
            cohort_path = synth_dir / "cohort.json"
            write_json(cohort_path, result.cohort.model_dump(mode="json"))
            logger.info(f"合成设备群已写入 {synth_dir}：{len(result.cohort.devices)} 台设备")
            outputs = [cohort_path, synth_dir / "fleet_labels.csv", synth_dir / "episodes.json"]
            outputs += [p for d in result.cohort.devices for p in d.paths()]
            return outputs

        await self.run_stage("synth", stage, seed=derive_seed(self.seed, "synth"))
