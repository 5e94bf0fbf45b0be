"""单包特征提取与编码。

列顺序冻结在 feature_columns() 中，模型检查点和指纹都依赖这个顺序：
    数值块  len/1514, ln(iat+1), h/8, ip_tos/255, ip_ttl/255, tcp_win/65535
    ip_flags R DF MF
    ip_proto TCP UDP ICMP      (OtherIPv4 全 0)
    tcp_flags F S R P A U E C N
    src_port one-hot, dst_port one-hot   (无端口时全 0)
"""
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .core.log import logger
from .core.ports import HIERARCHY_BINS, PORT_HIERARCHY, THREE_RANGE_BINS, ThreeRange, hierarchy_index
from .ingest import shannon_entropy
from .models import IP_FLAG_ORDER, TCP_FLAG_ORDER, IngestStats, IpProto, PacketRecord, RawFeatures, Scheme

MAX_FRAME_LEN = 1514
NUMERIC_COLUMNS = ["len", "iat", "h", "ip_tos", "ip_ttl", "tcp_win"]
PROTO_ORDER = (IpProto.TCP, IpProto.UDP, IpProto.ICMP)
SIDECAR_COLUMNS = ["timestamp", "label", "attack_kind", "device_id"]


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    scheme: Scheme

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def feature_columns(scheme: Scheme) -> List[str]:
    bins = THREE_RANGE_BINS if scheme is Scheme.THREE_RANGE else HIERARCHY_BINS
    return (
        list(NUMERIC_COLUMNS)
        + [f"ip_flag_{f}" for f in IP_FLAG_ORDER]
        + [f"ip_proto_{p.value}" for p in PROTO_ORDER]
        + [f"tcp_flag_{f}" for f in TCP_FLAG_ORDER]
        + [f"src_port_{b}" for b in bins]
        + [f"dst_port_{b}" for b in bins]
    )


def discretize_three_range(port: int) -> ThreeRange:
    return ThreeRange.from_port(port)


def discretize_hierarchical(port: int) -> str:
    return PORT_HIERARCHY[hierarchy_index(port)][0]


def extract_raw(rec: PacketRecord, prev_ts: Optional[float], stats: Optional[IngestStats] = None) -> RawFeatures:
    iat = 0.0 if prev_ts is None else rec.timestamp - prev_ts
    if iat < 0:
        if stats is not None:
            stats.out_of_order += 1
        logger.warning(f"时间戳乱序 (ts={rec.timestamp}, prev={prev_ts})，iat 记为 0")
        iat = 0.0
    h = rec.entropy if rec.entropy is not None else shannon_entropy(rec.packet_bytes)
    return RawFeatures(
        len=rec.frame_len, iat=iat, h=h, ip_tos=rec.ip_tos, ip_flags=rec.ip_flags, ip_ttl=rec.ip_ttl,
        ip_proto=rec.ip_proto, src_port=rec.src_port, dst_port=rec.dst_port,
        tcp_flags=rec.tcp_flags, tcp_win=rec.tcp_win,
    )


def _port_index(port: int, scheme: Scheme) -> int:
    if scheme is Scheme.THREE_RANGE:
        return int(ThreeRange.from_port(port))
    return hierarchy_index(port)


def encode(raw: RawFeatures, scheme: Scheme) -> FeatureVector:
    n_bins = len(THREE_RANGE_BINS) if scheme is Scheme.THREE_RANGE else len(HIERARCHY_BINS)
    values = np.zeros(scheme.dim, dtype=np.float64)
    values[0] = raw.len / MAX_FRAME_LEN
    values[1] = math.log(raw.iat + 1.0)
    values[2] = raw.h / 8.0
    values[3] = raw.ip_tos / 255.0
    values[4] = raw.ip_ttl / 255.0
    values[5] = (raw.tcp_win or 0) / 65535.0
    offset = len(NUMERIC_COLUMNS)

    for i, flag in enumerate(IP_FLAG_ORDER):
        values[offset + i] = flag in raw.ip_flags
    offset += len(IP_FLAG_ORDER)

    if raw.ip_proto in PROTO_ORDER:
        values[offset + PROTO_ORDER.index(raw.ip_proto)] = 1.0
    offset += len(PROTO_ORDER)

    for i, flag in enumerate(TCP_FLAG_ORDER):
        values[offset + i] = flag in raw.tcp_flags
    offset += len(TCP_FLAG_ORDER)

    if raw.src_port is not None:
        values[offset + _port_index(raw.src_port, scheme)] = 1.0
    offset += n_bins
    if raw.dst_port is not None:
        values[offset + _port_index(raw.dst_port, scheme)] = 1.0
    return FeatureVector(values=values, scheme=scheme)


def featurize(
    records: Iterable[PacketRecord],
    scheme: Scheme,
    device_id: str = "",
    stats: Optional[IngestStats] = None,
) -> Tuple[np.ndarray, pd.DataFrame]:
    """按流顺序计算 iat 后编码，返回 (特征矩阵, 标签边车表)"""
    rows, meta = [], []
    prev_ts = None
    for rec in records:
        raw = extract_raw(rec, prev_ts, stats)
        rows.append(encode(raw, scheme).values)
        meta.append((rec.timestamp, rec.label.value, rec.attack_kind or "", device_id))
        prev_ts = rec.timestamp if prev_ts is None else max(prev_ts, rec.timestamp)
    matrix = np.vstack(rows) if rows else np.zeros((0, scheme.dim))
    return matrix, pd.DataFrame(meta, columns=SIDECAR_COLUMNS)


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}.labels.csv")


def write_feature_matrix(path: Union[str, Path], matrix: np.ndarray, sidecar: pd.DataFrame, scheme: Scheme) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(matrix, columns=feature_columns(scheme)).to_csv(path, index=False, float_format="%.17g")
    sidecar.to_csv(sidecar_path(path), index=False, float_format="%.17g")


def read_feature_matrix(path: Union[str, Path]) -> Tuple[np.ndarray, pd.DataFrame, Scheme]:
    frame = pd.read_csv(path)
    columns = list(frame.columns)
    for scheme in Scheme:
        if columns == feature_columns(scheme):
            break
    else:
        raise ValueError(f"{path}: 列名与任何离散化方案都不匹配")
    side_path = sidecar_path(path)
    if side_path.exists():
        sidecar = pd.read_csv(side_path, keep_default_na=False, dtype={"label": str, "attack_kind": str, "device_id": str})
    else:
        sidecar = pd.DataFrame({"timestamp": np.zeros(len(frame)), "label": "unlabeled",
                                "attack_kind": "", "device_id": ""})
    return frame.to_numpy(dtype=np.float64), sidecar, scheme
