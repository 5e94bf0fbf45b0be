import asyncio
import math
from pathlib import Path
from typing import List

import numpy as np

from ..core.log import logger
from ..core.utils import derive_seed, write_json
from ..exceptions import ConfigError
from ..fingerprint import cluster_init
from ..fl import TRIALS, fl_vs_isolated_table, run_fl, run_isolated, tune_grid, tune_trials
from ..models import ClusterAssignment
from ..nn import save_checkpoint


def cluster_dir(root: Path, cluster: int) -> Path:
    return root / f"cluster_{cluster}"


class TrainHandlers:
    """一个 Mixin 类，包含按簇联邦训练 (train) 与优化器试验 (tune) 指令。"""

    def _apply_fl_overrides(self, args) -> None:
        update = {}
        if getattr(args, "rounds", None) is not None:
            update["rounds"] = args.rounds
        if getattr(args, "epochs", None) is not None:
            update["local_epochs"] = args.epochs
        if update:
            self.fl_config = self.fl_config.model_validate({**self.fl_config.model_dump(), **update})
            self.config = self.config.model_copy(update={"fl": self.fl_config})

    def _cluster_members(self, assignment: ClusterAssignment, cluster: int) -> List[str]:
        return [assignment.device_ids[i] for i in assignment.members(cluster)]

    async def _train_cluster(self, assignment: ClusterAssignment, cluster: int, fingerprints: np.ndarray) -> dict:
        manager = self.cohort_manager
        members = assignment.members(cluster)
        device_ids = self._cluster_members(assignment, cluster)
        clients = [c.fresh() for c in manager.clients(device_ids)]
        weights = [c.n_c for c in clients] if self.fp_config.weighted_init else None
        W_k = cluster_init([fingerprints[i] for i in members], weights)

        client_opt, server_opt = self.optimizers()
        template = self.template()
        seed = derive_seed(self.seed, f"fl/cluster_{cluster}")
        label = f"簇 {cluster} "
        result = await run_fl(
            clients, W_k, template, self.fl_config.rounds, self.fl_config.local_epochs, server_opt,
            self.train_config, seed, client_opt=client_opt, client_fraction=self.fl_config.client_fraction,
            persistent_client_state=self.fl_config.persistent_client_state, label=label,
        )

        out = cluster_dir(self.out_dir / "train", cluster)
        out.mkdir(parents=True, exist_ok=True)
        outputs = [out / "model.ckpt", out / "round_loss.csv"]
        save_checkpoint(template.copy_with(result.params), self.scheme, outputs[0])
        result.loss_log.to_csv(outputs[1], index=False, float_format="%.17g")

        summary = {
            "cluster": cluster,
            "device_ids": device_ids,
            "client_opt": str(client_opt),
            "server_opt": str(server_opt),
            "rounds": self.fl_config.rounds,
            "local_epochs": self.fl_config.local_epochs,
            "final_mean_eval_loss": result.final_mean_loss,
        }
        if self.fl_config.compare_isolated:
            budget = self.fl_config.rounds * self.fl_config.local_epochs
            isolated = await run_isolated([c.fresh() for c in clients], budget, template, self.train_config, seed,
                                          W_init=W_k)
            iso_path, cmp_path = out / "isolated_loss.csv", out / "fl_vs_isolated.csv"
            isolated.loss_log.to_csv(iso_path, index=False, float_format="%.17g")
            table = fl_vs_isolated_table(result.loss_log, isolated.loss_log, self.fl_config.local_epochs)
            table.to_csv(cmp_path, index=False, float_format="%.17g")
            outputs += [iso_path, cmp_path]
            summary["isolated_final_mean_eval_loss"] = float(isolated.loss_log["mean"].iloc[-1])
            logger.info(f"{label}FL 最终平均损失 {result.final_mean_loss:.6g}，"
                        f"孤立训练 {summary['isolated_final_mean_eval_loss']:.6g}")
        return {"summary": summary, "outputs": outputs}

    async def handle_train(self, args=None):
        self._apply_fl_overrides(args)
        self.ensure_cohort_loaded()
        assignment = self.load_assignment()
        fingerprints, _ = self.load_fingerprint_rows()

        async def stage():
            results = await asyncio.gather(*[
                self._train_cluster(assignment, cluster, fingerprints) for cluster in range(assignment.k)
            ])
            outputs = [p for r in results for p in r["outputs"]]
            clusters_path = self.out_dir / "train" / "clusters.json"
            write_json(clusters_path, {"k": assignment.k, "clusters": [r["summary"] for r in results]})
            return outputs + [clusters_path]

        await self.run_stage("train", stage, seed=derive_seed(self.seed, "fl"))

    async def handle_tune(self, args=None):
        cluster = getattr(args, "cluster", 0)
        mode = getattr(args, "mode", "trials")
        self.ensure_cohort_loaded()
        assignment = self.load_assignment()
        if not 0 <= cluster < assignment.k:
            raise ConfigError(f"簇编号 {cluster} 越界，共有 {assignment.k} 个簇")
        device_ids = self._cluster_members(assignment, cluster)
        out = cluster_dir(self.out_dir / "tune", cluster)

        async def stage():
            clients = self.cohort_manager.clients(device_ids)
            template = self.template()
            W0 = template.flatten()
            seed = derive_seed(self.seed, f"tune/cluster_{cluster}")
            out.mkdir(parents=True, exist_ok=True)
            if mode == "grid":
                grid = await tune_grid(clients, W0, template, self.tune_config.rounds, self.train_config, seed,
                                       self.tune_config.grid_client_family, self.tune_config.grid_server_family,
                                       self.tune_config.client_lrs, self.tune_config.server_lrs)
                grid_path = out / "grid.csv"
                grid.to_csv(grid_path, float_format="%.17g")
                return [grid_path]

            result = await tune_trials(clients, W0, template, self.tune_config.rounds, self.train_config, seed,
                                       self.tune_config.trials)
            trials_path, summary_path = out / "trials.csv", out / "tune_summary.json"
            result.curves.to_csv(trials_path, index=False, float_format="%.17g")
            best = result.best_trial
            write_json(summary_path, {
                "cluster": cluster,
                "device_ids": device_ids,
                "rounds": self.tune_config.rounds,
                "trials": {
                    str(t): {
                        "client_opt": str(TRIALS[t][0]),
                        "server_opt": str(TRIALS[t][1]),
                        # JSON 不支持 inf，发散的试验记为 null
                        "final_mean_eval_loss": v if math.isfinite(v) else None,
                    }
                    for t, v in sorted(result.final.items())
                },
                "best_trial": best,
            })
            logger.info(f"簇 {cluster} 最优试验: Trial {best} {TRIALS[best][0]}/{TRIALS[best][1]}")
            return [trials_path, summary_path]

        await self.run_stage(f"tune/cluster_{cluster}/{mode}", stage)
