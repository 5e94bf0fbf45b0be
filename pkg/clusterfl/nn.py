"""极简全连接网络：自编码器构建、前向/反向传播、MSE+L2 损失与三类优化器。

所有参数存放在一个连续的 float64 向量里，各层的 W/b 只是这个向量上的视图，
因此 flatten/unflatten 是零成本且精确的，联邦聚合可以直接在向量上做算术。
展平顺序：按层，先 W 后 b，W 行优先（形状为 out x in）。
"""
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core.log import logger
from .exceptions import DataError, NumericError
from .models import OptimizerFamily, OptimizerSpec, Scheme, TrainConfig

RELU = "relu"
IDENTITY = "identity"
_ACTIVATION_CODES = {RELU: 0, IDENTITY: 1}

CHECKPOINT_MAGIC = b"CFLA"
CHECKPOINT_VERSION = 1
CHECKPOINT_PRECISION = b"f4"


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = RELU

    @property
    def shape(self) -> Tuple[int, int]:
        return self.weight.shape


class DenseNet:
    def __init__(self, shapes: Sequence[Tuple[int, int]], activations: Optional[Sequence[str]] = None,
                 params: Optional[np.ndarray] = None):
        """shapes 为每层的 (out, in)，相邻层维度必须首尾相接"""
        if not shapes:
            raise ValueError("网络至少需要一层")
        for (prev_out, _), (_, next_in) in zip(shapes, shapes[1:]):
            if prev_out != next_in:
                raise ValueError(f"层维度不连续: {shapes}")
        activations = list(activations or [RELU] * len(shapes))
        if len(activations) != len(shapes) or any(a not in _ACTIVATION_CODES for a in activations):
            raise ValueError(f"激活函数列表不合法: {activations}")

        self.shapes: List[Tuple[int, int]] = [tuple(s) for s in shapes]
        self.param_count = sum(o * i + o for o, i in self.shapes)
        if params is None:
            self.params = np.zeros(self.param_count, dtype=np.float64)
        else:
            if params.shape != (self.param_count,):
                raise ValueError(f"参数向量长度 {params.shape} 与结构不符 ({self.param_count})")
            self.params = np.array(params, dtype=np.float64, copy=True)

        self.layers: List[DenseLayer] = []
        self._layout: List[Tuple[str, int, int]] = []
        offset = 0
        for index, ((out_dim, in_dim), act) in enumerate(zip(self.shapes, activations)):
            w_end = offset + out_dim * in_dim
            b_end = w_end + out_dim
            self.layers.append(DenseLayer(
                weight=self.params[offset:w_end].reshape(out_dim, in_dim),
                bias=self.params[w_end:b_end],
                activation=act,
            ))
            self._layout.append((f"layer{index}.W", offset, w_end))
            self._layout.append((f"layer{index}.b", w_end, b_end))
            offset = b_end

    @property
    def input_dim(self) -> int:
        return self.shapes[0][1]

    @property
    def output_dim(self) -> int:
        return self.shapes[-1][0]

    @property
    def activations(self) -> List[str]:
        return [layer.activation for layer in self.layers]

    def layout(self) -> List[Tuple[str, int, int]]:
        return list(self._layout)

    def weight_mask(self) -> np.ndarray:
        """L2 只作用于权重矩阵，偏置不参与"""
        mask = np.zeros(self.param_count, dtype=bool)
        for name, start, stop in self._layout:
            if name.endswith(".W"):
                mask[start:stop] = True
        return mask

    def flatten(self) -> np.ndarray:
        return self.params.copy()

    def unflatten(self, flat: np.ndarray) -> None:
        if flat.shape != (self.param_count,):
            raise ValueError(f"参数向量长度 {flat.shape} 与结构不符 ({self.param_count})")
        self.params[:] = flat

    def copy_with(self, flat: Optional[np.ndarray] = None) -> "DenseNet":
        return DenseNet(self.shapes, self.activations, self.flatten() if flat is None else flat)

    def locate(self, index: int) -> str:
        for name, start, stop in self._layout:
            if start <= index < stop:
                return name
        return "?"


def build_autoencoder(input_dim: int, seed: int) -> DenseNet:
    """27 -> 13-6-13-27，69 -> 34-17-34-69；每层后都接 ReLU，Glorot 均匀初始化，偏置为 0"""
    if input_dim not in (Scheme.THREE_RANGE.dim, Scheme.HIERARCHICAL.dim):
        raise ValueError(f"不支持的输入维度: {input_dim}")
    h1 = input_dim // 2
    h2 = h1 // 2
    widths = [input_dim, h1, h2, h1, input_dim]
    shapes = [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]
    net = DenseNet(shapes)
    rng = np.random.Generator(np.random.PCG64(seed))
    for layer in net.layers:
        out_dim, in_dim = layer.shape
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        layer.weight[:] = rng.uniform(-limit, limit, size=(out_dim, in_dim))
    return net


def _as_batch(net: DenseNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    batch = x[None, :] if x.ndim == 1 else x
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise DataError(f"输入维度 {x.shape} 与网络输入维度 {net.input_dim} 不符")
    return batch


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(z, 0.0) if activation == RELU else z


def _forward_cache(net: DenseNet, batch: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    inputs, pre_acts = [], []
    a = batch
    for layer in net.layers:
        inputs.append(a)
        z = a @ layer.weight.T + layer.bias
        pre_acts.append(z)
        a = _activate(z, layer.activation)
    inputs.append(a)
    return inputs, pre_acts


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    batch = _as_batch(net, x)
    out = _forward_cache(net, batch)[0][-1]
    return out[0] if np.ndim(x) == 1 else out


def mse(x: np.ndarray, x_prime: np.ndarray) -> float:
    x, x_prime = np.asarray(x, dtype=np.float64), np.asarray(x_prime, dtype=np.float64)
    if x.shape != x_prime.shape:
        raise ValueError(f"维度不一致: {x.shape} vs {x_prime.shape}")
    return float(np.mean((x - x_prime) ** 2))


def reconstruction_errors(net: DenseNet, X: np.ndarray) -> np.ndarray:
    """逐行重构 MSE"""
    batch = _as_batch(net, X)
    out = _forward_cache(net, batch)[0][-1]
    return np.mean((out - batch) ** 2, axis=1)


def loss(net: DenseNet, batch: np.ndarray, l2: float = 0.0) -> float:
    data_term = float(np.mean(reconstruction_errors(net, batch)))
    if l2 == 0.0:
        return data_term
    return data_term + l2 * sum(float(np.sum(layer.weight ** 2)) for layer in net.layers)


def loss_and_grad(net: DenseNet, batch: np.ndarray, l2: float = 0.0) -> Tuple[float, np.ndarray]:
    batch = _as_batch(net, batch)
    n, d = batch.shape
    inputs, pre_acts = _forward_cache(net, batch)
    out = inputs[-1]
    diff = out - batch
    value = float(np.sum(diff ** 2) / (n * d))

    # 梯度用同结构的零网络承载，各层视图直接写进连续向量
    grad_net = DenseNet(net.shapes, net.activations)
    g_layers = grad_net.layers
    delta = 2.0 * diff / (n * d)
    for index in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[index]
        if layer.activation == RELU:
            delta = delta * (pre_acts[index] > 0)
        g_layers[index].weight[:] = delta.T @ inputs[index]
        g_layers[index].bias[:] = delta.sum(axis=0)
        if index > 0:
            delta = delta @ layer.weight

    grad = grad_net.params
    if l2:
        value += l2 * sum(float(np.sum(layer.weight ** 2)) for layer in net.layers)
        grad[net.weight_mask()] += 2.0 * l2 * net.params[net.weight_mask()]
    return value, grad


def backward(net: DenseNet, batch: np.ndarray, l2: float = 0.0) -> np.ndarray:
    """损失对全部参数的精确梯度（与 flatten 同序）。ReLU 在 0 处的次梯度取 0。"""
    return loss_and_grad(net, batch, l2)[1]


# --- 优化器 ---

OPTIMIZER_HYPERPARAMS: Dict[OptimizerFamily, Dict[str, float]] = {
    OptimizerFamily.SGD: {},
    OptimizerFamily.SGDM: {"momentum": 0.9},
    OptimizerFamily.ADAM1: {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    OptimizerFamily.ADAM2: {"beta1": 0.9, "beta2": 0.99, "eps": 1e-3},
}


def sgd(lr: float) -> OptimizerSpec:
    return OptimizerSpec(family=OptimizerFamily.SGD, lr=lr)


def sgdm(lr: float) -> OptimizerSpec:
    return OptimizerSpec(family=OptimizerFamily.SGDM, lr=lr)


def adam1(lr: float) -> OptimizerSpec:
    return OptimizerSpec(family=OptimizerFamily.ADAM1, lr=lr)


def adam2(lr: float) -> OptimizerSpec:
    return OptimizerSpec(family=OptimizerFamily.ADAM2, lr=lr)


class Optimizer:
    """一个 OptimizerSpec 加上与参数向量等长的状态"""

    def __init__(self, spec: OptimizerSpec, size: int):
        self.spec = spec
        self.size = size
        self.hyper = OPTIMIZER_HYPERPARAMS[spec.family]
        self.reset()

    def reset(self) -> None:
        self.t = 0
        self.velocity = np.zeros(self.size) if self.spec.family is OptimizerFamily.SGDM else None
        if self.spec.family in (OptimizerFamily.ADAM1, OptimizerFamily.ADAM2):
            self.m = np.zeros(self.size)
            self.v = np.zeros(self.size)
        else:
            self.m = self.v = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if grad.shape != (self.size,):
            raise ValueError(f"梯度长度 {grad.shape} 与优化器状态 ({self.size}) 不符")
        self.t += 1
        lr = self.spec.lr
        family = self.spec.family
        if family is OptimizerFamily.SGD:
            return params - lr * grad
        if family is OptimizerFamily.SGDM:
            self.velocity = self.hyper["momentum"] * self.velocity + grad
            return params - lr * self.velocity
        beta1, beta2, eps = self.hyper["beta1"], self.hyper["beta2"], self.hyper["eps"]
        self.m = beta1 * self.m + (1 - beta1) * grad
        self.v = beta2 * self.v + (1 - beta2) * grad ** 2
        m_hat = self.m / (1 - beta1 ** self.t)
        v_hat = self.v / (1 - beta2 ** self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + eps)


def make_optimizer(spec: OptimizerSpec, size: int) -> Optimizer:
    return Optimizer(spec, size)


def check_finite(params: np.ndarray, net: Optional[DenseNet] = None, context: str = "") -> None:
    bad = np.flatnonzero(~np.isfinite(params))
    if bad.size:
        where = net.locate(int(bad[0])) if net is not None else f"index {int(bad[0])}"
        raise NumericError(f"{context}参数出现 NaN/Inf，位于 {where}")


def apply_step(opt: Optimizer, params: np.ndarray, grad: np.ndarray, net: Optional[DenseNet] = None,
               context: str = "") -> np.ndarray:
    updated = opt.step(params, grad)
    check_finite(updated, net, context)
    return updated


def train_epochs(
    net: DenseNet,
    X: np.ndarray,
    epochs: int,
    optimizer: Optimizer,
    config: TrainConfig,
    seed: int,
    epoch_offset: int = 0,
    context: str = "",
) -> List[float]:
    """就地训练 net 若干个完整 epoch，返回每个 epoch 的平均训练损失。

    第 e 个全局 epoch 的打乱顺序只由 (seed, e) 决定，与客户端编号无关，
    所以数据相同的两个客户端轨迹完全一致。最后一个不足 batch_size 的批次保留。
    """
    if epochs < 1:
        raise ValueError("epochs 必须 >= 1")
    X = _as_batch(net, X)
    n = X.shape[0]
    if n == 0:
        raise DataError(f"{context}训练数据为空")
    history = []
    for local_epoch in range(epochs):
        global_epoch = epoch_offset + local_epoch
        order = np.random.Generator(np.random.PCG64([seed, global_epoch])).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = X[order[start:start + config.batch_size]]
            value, grad = loss_and_grad(net, batch, config.l2)
            net.params[:] = apply_step(optimizer, net.params, grad, net, context)
            total += value * batch.shape[0]
        history.append(total / n)
    logger.debug(f"{context}训练 {epochs} 个 epoch，最终训练损失 {history[-1]:.6g}")
    return history


# --- 检查点 ---

def save_checkpoint(net: DenseNet, scheme: Scheme, path: Union[str, Path]) -> None:
    """二进制检查点：magic、版本、方案、精度标记、层结构，然后是小端 float32 参数"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scheme_bytes = scheme.value.encode()
    header = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION),
              struct.pack("<B", len(scheme_bytes)), scheme_bytes, CHECKPOINT_PRECISION,
              struct.pack("<H", len(net.shapes))]
    for (out_dim, in_dim), act in zip(net.shapes, net.activations):
        header.append(struct.pack("<IIB", out_dim, in_dim, _ACTIVATION_CODES[act]))
    header.append(struct.pack("<Q", net.param_count))
    with open(path, "wb") as f:
        f.write(b"".join(header))
        f.write(net.params.astype("<f4").tobytes())


def load_checkpoint(path: Union[str, Path]) -> Tuple[DenseNet, Scheme]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: 不是模型检查点")
    offset = 4
    (version,) = struct.unpack_from("<H", data, offset)
    offset += 2
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: 不支持的检查点版本 {version}")
    (scheme_len,) = struct.unpack_from("<B", data, offset)
    offset += 1
    scheme = Scheme(data[offset:offset + scheme_len].decode())
    offset += scheme_len
    if data[offset:offset + 2] != CHECKPOINT_PRECISION:
        raise DataError(f"{path}: 未知的精度标记 {data[offset:offset + 2]!r}")
    offset += 2
    (n_layers,) = struct.unpack_from("<H", data, offset)
    offset += 2
    codes = {v: k for k, v in _ACTIVATION_CODES.items()}
    shapes, activations = [], []
    for _ in range(n_layers):
        out_dim, in_dim, code = struct.unpack_from("<IIB", data, offset)
        offset += struct.calcsize("<IIB")
        shapes.append((out_dim, in_dim))
        activations.append(codes[code])
    (count,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    params = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float64)
    return DenseNet(shapes, activations, params), scheme
