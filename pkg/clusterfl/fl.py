"""广义联邦学习：本地训练、伪梯度聚合、服务端优化器、轮次编排与超参数试验。"""
import asyncio
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .core.log import logger
from .core.utils import derive_seed, make_rng
from .exceptions import NumericError
from .models import OptimizerFamily, OptimizerSpec, TrainConfig
from .nn import DenseNet, Optimizer, apply_step, build_autoencoder, make_optimizer, reconstruction_errors, train_epochs


@dataclass
class ClientState:
    client_id: int
    device_id: str
    train_data: np.ndarray
    eval_data: np.ndarray
    client_opt: OptimizerSpec
    params: Optional[np.ndarray] = None
    optimizer: Optional[Optimizer] = None
    epochs_done: int = 0

    def __post_init__(self):
        if self.train_data.shape[0] == 0:
            raise ValueError(f"客户端 {self.client_id} 没有训练数据")

    @property
    def n_c(self) -> int:
        return int(self.train_data.shape[0])

    def fresh(self) -> "ClientState":
        """同样的数据与划分，清空训练进度"""
        return dataclasses.replace(self, params=None, optimizer=None, epochs_done=0)


@dataclass
class ServerState:
    params: np.ndarray
    optimizer: Optimizer
    client_ids: List[int]
    round: int = 0


@dataclass
class FLResult:
    params: np.ndarray
    loss_log: pd.DataFrame
    client_params: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def final_mean_loss(self) -> float:
        return float(self.loss_log["mean"].iloc[-1])


@dataclass
class IsolatedResult:
    client_params: Dict[int, np.ndarray]
    loss_log: pd.DataFrame


# Trial 编号 -> (ClientOpt, ServerOpt)；客户端学习率统一 1e-3
_CLIENT_FAMILIES = (OptimizerFamily.SGD, OptimizerFamily.SGDM, OptimizerFamily.ADAM1, OptimizerFamily.ADAM2)
_SERVER_CHOICES = (
    (OptimizerFamily.SGD, 1.0), (OptimizerFamily.SGDM, 1.0),
    (OptimizerFamily.ADAM1, 1e-2), (OptimizerFamily.ADAM2, 1e-2),
)
TRIALS: Dict[int, Tuple[OptimizerSpec, OptimizerSpec]] = {
    4 * ci + si + 1: (
        OptimizerSpec(family=client_family, lr=1e-3),
        OptimizerSpec(family=server_family, lr=server_lr),
    )
    for ci, client_family in enumerate(_CLIENT_FAMILIES)
    for si, (server_family, server_lr) in enumerate(_SERVER_CHOICES)
}

TUNED_PRESETS: Dict[str, Tuple[OptimizerSpec, OptimizerSpec]] = {
    "mqtt": (OptimizerSpec(family=OptimizerFamily.ADAM1, lr=0.005), OptimizerSpec(family=OptimizerFamily.SGD, lr=0.75)),
    "coap": (OptimizerSpec(family=OptimizerFamily.ADAM1, lr=0.005), OptimizerSpec(family=OptimizerFamily.SGD, lr=1.25)),
    "camera": (OptimizerSpec(family=OptimizerFamily.ADAM1, lr=0.001), OptimizerSpec(family=OptimizerFamily.SGD, lr=1.5)),
}


def local_train(
    client: ClientState,
    W: np.ndarray,
    epochs: int,
    *,
    template: DenseNet,
    train_config: TrainConfig,
    seed: int,
    persistent_state: bool = False,
) -> Tuple[np.ndarray, int]:
    """把客户端模型设为 W，训练 epochs 个完整 epoch，返回 (W_c, n_c)。

    默认每次广播后重置客户端优化器状态；persistent_state 为 True 时沿用上一轮的动量/矩估计。
    """
    if epochs < 1:
        raise ValueError("本地训练 epochs 必须 >= 1")
    net = template.copy_with(W)
    if persistent_state and client.optimizer is not None:
        optimizer = client.optimizer
    else:
        optimizer = make_optimizer(client.client_opt, net.param_count)
    train_epochs(net, client.train_data, epochs, optimizer, train_config, seed,
                 epoch_offset=client.epochs_done, context=f"客户端 {client.client_id} ({client.device_id}) ")
    client.epochs_done += epochs
    client.optimizer = optimizer
    client.params = net.flatten()
    return client.params, client.n_c


def aggregate(deltas: Sequence[Tuple[np.ndarray, int]]) -> np.ndarray:
    """伪梯度 g_G = -Σ (n_i/n) Δ_i，调用方须按 client_id 升序传入"""
    if not deltas:
        raise ValueError("没有可聚合的客户端更新")
    size = deltas[0][0].shape
    total = sum(n for _, n in deltas)
    if total <= 0:
        raise ValueError("客户端样本总数必须大于 0")
    g = np.zeros(size, dtype=np.float64)
    for delta, n in deltas:
        if delta.shape != size:
            raise ValueError(f"客户端更新长度不一致: {delta.shape} vs {size}")
        g -= (n / total) * delta
    return g


def server_step(server: ServerState, g: np.ndarray, net: Optional[DenseNet] = None) -> np.ndarray:
    server.params = apply_step(server.optimizer, server.params, g, net, context=f"服务端第 {server.round + 1} 轮")
    server.round += 1
    return server.params


def eval_loss(template: DenseNet, params: np.ndarray, client: ClientState) -> float:
    """评估损失为 20% 评估集上的平均重构 MSE；评估集为空时退回训练集"""
    data = client.eval_data if client.eval_data.shape[0] else client.train_data
    return float(np.mean(reconstruction_errors(template.copy_with(params), data)))


def _loss_row(index_name: str, index: int, losses: Dict[int, float]) -> dict:
    values = np.array(list(losses.values()))
    row = {index_name: index, "mean": float(values.mean()), "std": float(values.std()), "min": float(values.min()),
           "median": float(np.median(values)), "max": float(values.max())}
    row.update({f"client_{cid}": loss for cid, loss in sorted(losses.items())})
    return row


def select_clients(cohort: Sequence[ClientState], fraction: float, rng: np.random.Generator) -> List[ClientState]:
    if fraction >= 1.0:
        return list(cohort)
    count = max(1, math.ceil(fraction * len(cohort)))
    picked = sorted(rng.choice(len(cohort), size=count, replace=False))
    return [cohort[i] for i in picked]


async def run_fl(
    cohort: Sequence[ClientState],
    W_init: np.ndarray,
    template: DenseNet,
    rounds: int,
    epochs: int,
    server_opt: OptimizerSpec,
    train_config: TrainConfig,
    seed: int,
    client_opt: Optional[OptimizerSpec] = None,
    client_fraction: float = 1.0,
    persistent_client_state: bool = False,
    label: str = "",
) -> FLResult:
    """执行 rounds 轮联邦训练。每轮：广播 W_G，客户端并发本地训练，按 client_id 排序聚合，服务端更新。"""
    if rounds < 1:
        raise ValueError("rounds 必须 >= 1")
    cohort = sorted(cohort, key=lambda c: c.client_id)
    if client_opt is not None:
        for client in cohort:
            client.client_opt = client_opt
    server = ServerState(
        params=np.array(W_init, dtype=np.float64, copy=True),
        optimizer=make_optimizer(server_opt, W_init.shape[0]),
        client_ids=[c.client_id for c in cohort],
    )
    sample_rng = make_rng(derive_seed(seed, "client-sampling"))
    rows = []
    for r in range(1, rounds + 1):
        participants = select_clients(cohort, client_fraction, sample_rng)
        W_G = server.params.copy()
        tasks = [
            asyncio.to_thread(local_train, client, W_G, epochs, template=template, train_config=train_config,
                              seed=seed, persistent_state=persistent_client_state)
            for client in participants
        ]
        try:
            results = await asyncio.gather(*tasks)
        except NumericError as e:
            raise NumericError(f"{label}第 {r} 轮本地训练发散: {e}") from e
        # gather 按提交顺序返回，participants 已按 client_id 升序
        deltas = [(W_c - W_G, n_c) for W_c, n_c in results]
        server_step(server, aggregate(deltas), template)

        losses = {c.client_id: eval_loss(template, server.params, c) for c in cohort}
        rows.append(_loss_row("round", r, losses))
        logger.info(f"{label}FL 第 {r}/{rounds} 轮: 平均评估损失 {rows[-1]['mean']:.6g}")

    return FLResult(
        params=server.params,
        loss_log=pd.DataFrame(rows),
        client_params={c.client_id: c.params for c in cohort if c.params is not None},
    )


def _train_isolated(client: ClientState, W0: np.ndarray, total_epochs: int, template: DenseNet,
                    train_config: TrainConfig, seed: int) -> Tuple[np.ndarray, List[float]]:
    net = template.copy_with(W0)
    optimizer = make_optimizer(client.client_opt, net.param_count)
    losses = []
    for epoch in range(total_epochs):
        train_epochs(net, client.train_data, 1, optimizer, train_config, seed, epoch_offset=epoch,
                     context=f"孤立训练客户端 {client.client_id} ")
        losses.append(eval_loss(net, net.params, client))
    return net.flatten(), losses


async def run_isolated(
    cohort: Sequence[ClientState],
    total_epochs: int,
    template: DenseNet,
    train_config: TrainConfig,
    seed: int,
    W_init: Optional[np.ndarray] = None,
) -> IsolatedResult:
    """对照组：每个客户端只用自己的数据训练 total_epochs 个 epoch。

    未给出 W_init 时每个客户端使用各自派生种子的随机初始化。
    """
    if total_epochs < 1:
        raise ValueError("total_epochs 必须 >= 1")
    cohort = sorted(cohort, key=lambda c: c.client_id)
    inits = [
        W_init if W_init is not None
        else build_autoencoder(template.input_dim, derive_seed(seed, f"isolated-init/{c.client_id}")).flatten()
        for c in cohort
    ]
    results = await asyncio.gather(*[
        asyncio.to_thread(_train_isolated, c, w0, total_epochs, template, train_config, seed)
        for c, w0 in zip(cohort, inits)
    ])
    rows = [
        _loss_row("epoch", e + 1, {c.client_id: losses[e] for c, (_, losses) in zip(cohort, results)})
        for e in range(total_epochs)
    ]
    return IsolatedResult(
        client_params={c.client_id: params for c, (params, _) in zip(cohort, results)},
        loss_log=pd.DataFrame(rows),
    )


def fl_vs_isolated_table(fl_log: pd.DataFrame, isolated_log: pd.DataFrame, epochs_per_round: int) -> pd.DataFrame:
    """每轮 FL 平均评估损失与相同本地 epoch 预算下的孤立训练平均损失并列"""
    iso = isolated_log.set_index("epoch")["mean"]
    rows = []
    for _, row in fl_log.iterrows():
        budget = int(row["round"]) * epochs_per_round
        rows.append({
            "round": int(row["round"]),
            "local_epochs": budget,
            "fl_mean_eval_loss": float(row["mean"]),
            "isolated_mean_eval_loss": float(iso[budget]) if budget in iso.index else float("nan"),
        })
    return pd.DataFrame(rows)


@dataclass
class TuneResult:
    curves: pd.DataFrame
    final: Dict[int, float]

    @property
    def best_trial(self) -> int:
        return min(self.final, key=lambda t: (self.final[t], t))


async def tune_trials(
    cohort: Sequence[ClientState],
    W_init: np.ndarray,
    template: DenseNet,
    rounds: int,
    train_config: TrainConfig,
    seed: int,
    trials: Optional[Sequence[int]] = None,
) -> TuneResult:
    """依次运行试验表中的 ClientOpt/ServerOpt 组合，E=1，所有试验共用同一个初始模型"""
    trials = list(trials or TRIALS)
    curves, final = {}, {}
    for trial in trials:
        client_opt, server_opt = TRIALS[trial]
        fresh = [c.fresh() for c in cohort]
        try:
            result = await run_fl(fresh, W_init, template, rounds, 1, server_opt, train_config, seed,
                                  client_opt=client_opt, label=f"Trial {trial} ")
            curves[f"trial_{trial}"] = result.loss_log["mean"].to_numpy()
            final[trial] = result.final_mean_loss
        except NumericError as e:
            logger.warning(f"Trial {trial} ({client_opt}/{server_opt}) 发散: {e}")
            curves[f"trial_{trial}"] = np.full(rounds, np.nan)
            final[trial] = float("inf")
    frame = pd.DataFrame(curves)
    frame.insert(0, "round", np.arange(1, rounds + 1))
    return TuneResult(curves=frame, final=final)


async def tune_grid(
    cohort: Sequence[ClientState],
    W_init: np.ndarray,
    template: DenseNet,
    rounds: int,
    train_config: TrainConfig,
    seed: int,
    client_family: OptimizerFamily,
    server_family: OptimizerFamily,
    client_lrs: Sequence[float],
    server_lrs: Sequence[float],
) -> pd.DataFrame:
    """(η, η_s) 网格搜索，返回 log10(最终平均评估损失) 矩阵：行为 η，列为 η_s"""
    grid = pd.DataFrame(index=pd.Index(list(client_lrs), name="client_lr"),
                        columns=pd.Index(list(server_lrs), name="server_lr"), dtype=float)
    for client_lr in client_lrs:
        for server_lr in server_lrs:
            client_opt = OptimizerSpec(family=client_family, lr=client_lr)
            server_opt = OptimizerSpec(family=server_family, lr=server_lr)
            fresh = [c.fresh() for c in cohort]
            try:
                result = await run_fl(fresh, W_init, template, rounds, 1, server_opt, train_config, seed,
                                      client_opt=client_opt, label=f"网格 {client_opt}/{server_opt} ")
                value = math.log10(result.final_mean_loss) if result.final_mean_loss > 0 else float("-inf")
            except NumericError as e:
                logger.warning(f"网格点 {client_opt}/{server_opt} 发散: {e}")
                value = float("nan")
            grid.loc[client_lr, server_lr] = value
    return grid
