"""模型指纹与设备聚类。

流程：所有客户端从同一个 W0 出发训练 ε 个 epoch -> 展平参数 -> PCA(保留 90% 方差)
-> k=2..k_max 的 k-means++ 扫描 -> 轮廓系数最大的 K。
Davies-Bouldin 与 S_Dbw 只做报告，不参与选择。
"""
import asyncio
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.cluster import KMeans
from sklearn.metrics import (
    adjusted_mutual_info_score,
    adjusted_rand_score,
    davies_bouldin_score,
    silhouette_samples,
    v_measure_score,
)

from .core.log import logger
from .core.utils import derive_seed
from .exceptions import ConfigError, DataError, DegenerateFingerprintError
from .fl import ClientState, local_train
from .models import ClusterAssignment, FingerprintConfig, KScore, KSelection, TrainConfig
from .nn import DenseNet

CENTROID_SHIFT_TOL = 1e-6


@dataclass
class FingerprintMatrix:
    rows: np.ndarray
    client_ids: List[int]
    device_ids: List[str]
    epsilon: int

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] != len(self.client_ids):
            raise ValueError("指纹矩阵行数与客户端数不一致")
        if list(self.client_ids) != sorted(self.client_ids):
            raise ValueError("指纹矩阵必须按 client_id 升序排列")


async def collect_fingerprints(
    cohort: Sequence[ClientState],
    W0: np.ndarray,
    epsilon: int,
    template: DenseNet,
    train_config: TrainConfig,
    seed: int,
) -> FingerprintMatrix:
    """每个客户端从同一个 W0 训练 ε 个 epoch，上交展平后的参数"""
    if epsilon < 1:
        raise ValueError("ε 必须 >= 1")
    cohort = sorted((c.fresh() for c in cohort), key=lambda c: c.client_id)
    results = await asyncio.gather(*[
        asyncio.to_thread(local_train, client, W0, epsilon, template=template, train_config=train_config, seed=seed)
        for client in cohort
    ])
    rows = np.vstack([params for params, _ in results])
    logger.info(f"已收集 {len(cohort)} 个模型指纹 (ε={epsilon}, 维度 {rows.shape[1]})")
    return FingerprintMatrix(rows=rows, client_ids=[c.client_id for c in cohort],
                             device_ids=[c.device_id for c in cohort], epsilon=epsilon)


class PCAModel:
    """基于 SVD 的 PCA。不做列标准化，直接在原始展平参数上计算。"""

    def __init__(self, variance: float = 0.90):
        self.variance = variance
        self.mean: Optional[np.ndarray] = None
        self.components: Optional[np.ndarray] = None
        self.explained_variance_ratio: Optional[np.ndarray] = None
        self.n_components = 0

    def fit(self, X: np.ndarray) -> "PCAModel":
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] < 2:
            raise DataError("PCA 至少需要 2 行")
        self.mean = X.mean(axis=0)
        centered = X - self.mean
        _, s, vt = np.linalg.svd(centered, full_matrices=False)
        explained = s ** 2 / (X.shape[0] - 1)
        total = explained.sum()
        if not np.any(centered) or total <= 0:
            raise DegenerateFingerprintError("所有模型指纹完全相同，无法聚类；请增大 ε 或检查各设备数据是否相同")
        # 每个主成分中绝对值最大的分量取正，保证结果与 LAPACK 实现无关
        signs = np.sign(vt[np.arange(vt.shape[0]), np.argmax(np.abs(vt), axis=1)])
        signs[signs == 0] = 1.0
        self.components = vt * signs[:, None]
        self.explained_variance_ratio = explained / total
        cumulative = np.cumsum(self.explained_variance_ratio)
        self.n_components = int(np.searchsorted(cumulative, self.variance - 1e-12) + 1)
        self.n_components = min(self.n_components, len(cumulative))
        return self

    def transform(self, X: np.ndarray, n_components: Optional[int] = None) -> np.ndarray:
        q = self.n_components if n_components is None else n_components
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components[:q].T

    def inverse_transform(self, scores: np.ndarray) -> np.ndarray:
        q = scores.shape[1]
        return scores @ self.components[:q] + self.mean


def pca_fit(X: np.ndarray, variance: float = 0.90) -> PCAModel:
    return PCAModel(variance).fit(X)


def kmeans(X: np.ndarray, k: int, seed: int, n_init: int = 10) -> Tuple[np.ndarray, np.ndarray, float]:
    """k-means++ 初始化 + Lloyd 迭代，n_init 次重启取惯性最小者。空簇由 sklearn 以最远点重新放置。"""
    X = np.asarray(X, dtype=np.float64)
    if not 2 <= k <= X.shape[0]:
        raise ConfigError(f"k={k} 超出范围 [2, {X.shape[0]}]")
    # sklearn 把 tol 乘以各维方差的均值，再与中心位移的平方和比较
    spread = float(np.mean(X.var(axis=0)))
    tol = CENTROID_SHIFT_TOL ** 2 / spread if spread > 0 else 0.0
    model = KMeans(n_clusters=k, init="k-means++", n_init=n_init, max_iter=300, tol=tol,
                   algorithm="lloyd", random_state=seed % (2 ** 32))
    labels = model.fit_predict(X)
    return labels.astype(int), model.cluster_centers_, float(model.inertia_)


def silhouette(X: np.ndarray, labels: np.ndarray) -> float:
    """单点簇贡献 0；每个点自成一簇时得分为 0"""
    labels = np.asarray(labels)
    n_labels = len(np.unique(labels))
    if n_labels < 2:
        raise ValueError("轮廓系数至少需要 2 个簇")
    if n_labels == len(labels):
        return 0.0
    return float(np.mean(silhouette_samples(X, labels)))


def davies_bouldin(X: np.ndarray, labels: np.ndarray) -> float:
    return float(davies_bouldin_score(X, labels))


def s_dbw(X: np.ndarray, labels: np.ndarray) -> float:
    """S_Dbw = Scat + Dens_bw，越小越好"""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    k = len(clusters)
    if k < 2:
        raise ValueError("S_Dbw 至少需要 2 个簇")
    members = [X[labels == c] for c in clusters]
    centroids = np.array([m.mean(axis=0) for m in members])
    sigma_norms = np.array([np.linalg.norm(m.var(axis=0)) for m in members])

    data_norm = np.linalg.norm(X.var(axis=0))
    scat = float(np.mean(sigma_norms) / data_norm) if data_norm > 0 else 0.0

    stdev = np.sqrt(np.sum(sigma_norms)) / k

    def density(points: np.ndarray, center: np.ndarray) -> int:
        return int(np.sum(np.linalg.norm(points - center, axis=1) <= stdev))

    dens = 0.0
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            pair = np.vstack([members[i], members[j]])
            midpoint = (centroids[i] + centroids[j]) / 2.0
            denom = max(density(pair, centroids[i]), density(pair, centroids[j]))
            if denom > 0:
                dens += density(pair, midpoint) / denom
    dens_bw = dens / (k * (k - 1))
    return scat + dens_bw


def select_k(scores: Sequence[KScore]) -> KSelection:
    """K = 轮廓系数最大者，并列取较小的 K；同时记录另两个指标的最优 K"""
    valid = [s for s in scores if np.isfinite(s.silhouette)]
    if not valid:
        raise DataError("没有任何 k 产生有效的聚类")
    best = min(valid, key=lambda s: (-s.silhouette, s.k))
    db_best = min(valid, key=lambda s: (s.davies_bouldin, s.k))
    sdbw_best = min(valid, key=lambda s: (s.s_dbw, s.k))
    return KSelection(
        k=best.k,
        silhouette_argmax=best.k,
        davies_bouldin_argmin=db_best.k,
        s_dbw_argmin=sdbw_best.k,
        unanimous=best.k == db_best.k == sdbw_best.k,
    )


def sweep_k(X: np.ndarray, k_max: int, seed: int, n_init: int = 10) -> Tuple[List[KScore], Dict[int, Tuple[np.ndarray, np.ndarray]]]:
    """k=2..min(k_max, n-1) 逐个聚类并打分；产生空簇的 k 记为无效"""
    upper = min(k_max, X.shape[0] - 1)
    if upper < 2:
        raise DataError(f"至少需要 3 个客户端才能选择 K，当前只有 {X.shape[0]} 个")
    scores, fits = [], {}
    for k in range(2, upper + 1):
        labels, centroids, inertia = kmeans(X, k, seed, n_init)
        if len(np.unique(labels)) < k:
            logger.warning(f"k={k} 时出现重合的簇中心，跳过")
            nan = float("nan")
            scores.append(KScore(k=k, silhouette=nan, davies_bouldin=nan, s_dbw=nan, inertia=inertia))
            continue
        scores.append(KScore(
            k=k,
            silhouette=silhouette(X, labels),
            davies_bouldin=davies_bouldin(X, labels),
            s_dbw=s_dbw(X, labels),
            inertia=inertia,
        ))
        fits[k] = (labels, centroids)
    return scores, fits


def external_validity(labels: Sequence[int], ground_truth: Sequence) -> Dict[str, float]:
    """仅用于评估报告，绝不参与 K 的选择"""
    return {
        "ari": float(adjusted_rand_score(ground_truth, labels)),
        "ami": float(adjusted_mutual_info_score(ground_truth, labels)),
        "v_measure": float(v_measure_score(ground_truth, labels)),
    }


def model_fingerprinting(
    fingerprints: FingerprintMatrix,
    config: FingerprintConfig,
    seed: int,
    ground_truth: Optional[Sequence] = None,
) -> ClusterAssignment:
    pca = pca_fit(fingerprints.rows, config.variance)
    reduced = pca.transform(fingerprints.rows)
    scores, fits = sweep_k(reduced, config.k_max, derive_seed(seed, "kmeans"), config.n_init)
    selection = select_k(scores)
    labels, centroids = fits[selection.k]

    external, external_by_k = None, {}
    if ground_truth is not None:
        external_by_k = {k: external_validity(fit[0], ground_truth) for k, fit in fits.items()}
        external = external_by_k[selection.k]

    n_proj = min(2, pca.components.shape[0])
    assignment = ClusterAssignment(
        labels=[int(label) for label in labels],
        k=selection.k,
        centroids=centroids.tolist(),
        scores=scores,
        selection=selection,
        client_ids=list(fingerprints.client_ids),
        device_ids=list(fingerprints.device_ids),
        epsilon=fingerprints.epsilon,
        explained_variance_ratio=pca.explained_variance_ratio.tolist(),
        n_components=pca.n_components,
        projection=pca.transform(fingerprints.rows, n_proj).tolist(),
        external=external,
        external_by_k=external_by_k,
    )
    agree = "一致" if selection.unanimous else (
        f"不一致 (DB={selection.davies_bouldin_argmin}, S_Dbw={selection.s_dbw_argmin})")
    logger.info(f"选定 K={selection.k}，PCA 保留 {pca.n_components} 个主成分，三项指标{agree}")
    return assignment


def cluster_init(members: Sequence[np.ndarray], weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """簇内成员参数的算术平均；给出 weights (n_c) 时为加权平均"""
    stacked = np.vstack(members)
    if weights is None:
        return stacked.mean(axis=0)
    return np.average(stacked, axis=0, weights=np.asarray(weights, dtype=np.float64))


async def fingerprint_epsilon_sweep(
    cohort: Sequence[ClientState],
    W0: np.ndarray,
    epsilons: Sequence[int],
    template: DenseNet,
    train_config: TrainConfig,
    config: FingerprintConfig,
    seed: int,
    ground_truth: Optional[Sequence] = None,
) -> Tuple[pd.DataFrame, Dict[int, ClusterAssignment]]:
    """对每个 ε 独立重做指纹、PCA 与聚类，汇总选出的 K"""
    rows, assignments = [], {}
    for epsilon in epsilons:
        matrix = await collect_fingerprints(cohort, W0, epsilon, template, train_config, seed)
        assignment = model_fingerprinting(matrix, config, seed, ground_truth)
        assignments[epsilon] = assignment
        best = next(s for s in assignment.scores if s.k == assignment.k)
        row = {"epsilon": epsilon, "k": assignment.k, "silhouette": best.silhouette,
               "unanimous": assignment.selection.unanimous}
        if assignment.external:
            row.update(assignment.external)
        rows.append(row)
    return pd.DataFrame(rows), assignments
