import base64
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator

IP_FLAG_ORDER: Tuple[str, ...] = ("R", "DF", "MF")
TCP_FLAG_ORDER: Tuple[str, ...] = ("F", "S", "R", "P", "A", "U", "E", "C", "N")


class IpProto(str, Enum):
    TCP = "TCP"
    UDP = "UDP"
    ICMP = "ICMP"
    OTHER = "OtherIPv4"


class Label(str, Enum):
    NORMAL = "normal"
    ATTACK = "attack"
    UNLABELED = "unlabeled"


class Scheme(str, Enum):
    THREE_RANGE = "three-range"
    HIERARCHICAL = "hierarchical"

    @property
    def dim(self) -> int:
        return 27 if self is Scheme.THREE_RANGE else 69


def _canonical_flags(value: Any, order: Tuple[str, ...], field: str) -> Tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        value = [value]
    flags = set(value)
    unknown = flags.difference(order)
    if unknown:
        raise ValueError(f"{field} 含有未知标志: {sorted(unknown)}")
    return tuple(f for f in order if f in flags)


# --- 数据包 ---

class PacketRecord(BaseModel):
    """一条解析后的链路层数据包。字段声明顺序即记录文件中的规范顺序。"""
    model_config = ConfigDict(frozen=True)

    timestamp: float
    frame_len: int = Field(ge=0)
    ip_tos: int = Field(ge=0, le=255)
    ip_flags: Tuple[str, ...] = ()
    ip_ttl: int = Field(ge=0, le=255)
    ip_proto: IpProto
    src_port: Optional[int] = Field(default=None, ge=0, le=65535)
    dst_port: Optional[int] = Field(default=None, ge=0, le=65535)
    tcp_flags: Tuple[str, ...] = ()
    tcp_win: Optional[int] = Field(default=None, ge=0, le=65535)
    packet_bytes: Optional[bytes] = None
    entropy: Optional[float] = Field(default=None, ge=0.0, le=8.0)
    # 仅用于标注真值，绝不作为模型输入
    src_ip: Optional[str] = None
    dst_ip: Optional[str] = None
    label: Label = Label.UNLABELED
    attack_kind: Optional[str] = None

    @field_validator("ip_flags", mode="before")
    @classmethod
    def _ip_flags(cls, v):
        return _canonical_flags(v, IP_FLAG_ORDER, "ip_flags")

    @field_validator("tcp_flags", mode="before")
    @classmethod
    def _tcp_flags(cls, v):
        return _canonical_flags(v, TCP_FLAG_ORDER, "tcp_flags")

    @field_validator("packet_bytes", mode="before")
    @classmethod
    def _decode_bytes(cls, v):
        if isinstance(v, str):
            return base64.b64decode(v, validate=True)
        return v

    @field_serializer("packet_bytes", when_used="json-unless-none")
    def _encode_bytes(self, v: bytes) -> str:
        return base64.b64encode(v).decode()

    @model_validator(mode="after")
    def _check_invariants(self):
        has_ports = self.ip_proto in (IpProto.TCP, IpProto.UDP)
        if has_ports != (self.src_port is not None and self.dst_port is not None):
            raise ValueError(f"{self.ip_proto.value} 报文的端口字段与协议不符")
        if self.ip_proto is not IpProto.TCP and (self.tcp_flags or self.tcp_win is not None):
            raise ValueError("非 TCP 报文不能携带 tcp_flags/tcp_win")
        if self.ip_proto is IpProto.TCP and self.tcp_win is None:
            raise ValueError("TCP 报文缺少 tcp_win")
        if self.packet_bytes is None and self.entropy is None:
            raise ValueError("packet_bytes 与 entropy 至少需要一个")
        # 截断抓包时 frame_len 取线上长度，packet_bytes 只是捕获到的前缀
        if self.packet_bytes is not None and len(self.packet_bytes) > self.frame_len:
            raise ValueError("packet_bytes 比 frame_len 更长")
        return self


class IngestStats(BaseModel):
    frames: int = 0
    kept: int = 0
    dropped_by_ethertype: Dict[str, int] = Field(default_factory=dict)
    malformed: int = 0
    vlan_tagged: int = 0
    unparseable_lines: int = 0
    out_of_order: int = 0

    def drop(self, ethertype: int) -> None:
        key = f"0x{ethertype:04x}"
        self.dropped_by_ethertype[key] = self.dropped_by_ethertype.get(key, 0) + 1

    def merge(self, other: "IngestStats") -> None:
        for name in ("frames", "kept", "malformed", "vlan_tagged", "unparseable_lines", "out_of_order"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        for key, count in other.dropped_by_ethertype.items():
            self.dropped_by_ethertype[key] = self.dropped_by_ethertype.get(key, 0) + count


class RawFeatures(BaseModel):
    len: int
    iat: float = Field(ge=0.0)
    h: float
    ip_tos: int
    ip_flags: Tuple[str, ...] = ()
    ip_ttl: int
    ip_proto: IpProto
    src_port: Optional[int] = None
    dst_port: Optional[int] = None
    tcp_flags: Tuple[str, ...] = ()
    tcp_win: Optional[int] = None


# --- 训练配置 ---

class OptimizerFamily(str, Enum):
    SGD = "SGD"
    SGDM = "SGDm"
    ADAM1 = "Adam1"
    ADAM2 = "Adam2"


class OptimizerSpec(BaseModel):
    family: OptimizerFamily
    lr: float = Field(gt=0)

    def __str__(self):
        return f"{self.family.value}({self.lr:g})"


class TrainConfig(BaseModel):
    batch_size: int = Field(default=32, ge=1)
    l2: float = Field(default=1e-5, ge=0)
    seed: int = 0


class FLConfig(BaseModel):
    rounds: int = Field(default=20, ge=1)
    local_epochs: int = Field(default=1, ge=1)
    client_opt: OptimizerSpec = OptimizerSpec(family=OptimizerFamily.ADAM1, lr=0.005)
    server_opt: OptimizerSpec = OptimizerSpec(family=OptimizerFamily.SGD, lr=0.75)
    preset: Optional[str] = None
    client_fraction: float = Field(default=1.0, gt=0, le=1)
    persistent_client_state: bool = False
    compare_isolated: bool = True


class TuneConfig(BaseModel):
    rounds: int = Field(default=20, ge=1)
    trials: List[int] = Field(default_factory=lambda: list(range(1, 17)))
    client_lrs: List[float] = Field(default_factory=lambda: [1e-4, 5e-4, 1e-3, 5e-3, 1e-2])
    server_lrs: List[float] = Field(default_factory=lambda: [0.5, 0.75, 1.0, 1.25, 1.5])
    grid_client_family: OptimizerFamily = OptimizerFamily.ADAM1
    grid_server_family: OptimizerFamily = OptimizerFamily.SGD

    @field_validator("trials")
    @classmethod
    def _trial_range(cls, v):
        bad = [t for t in v if not 1 <= t <= 16]
        if bad:
            raise ValueError(f"试验编号必须在 1..16 之间: {bad}")
        return v


class FingerprintConfig(BaseModel):
    epsilon: int = Field(default=4, ge=1)
    k_max: int = Field(default=40, ge=2)
    variance: float = Field(default=0.90, gt=0, le=1)
    n_init: int = Field(default=10, ge=1)
    weighted_init: bool = False
    epsilon_sweep: List[int] = Field(default_factory=list)

    @field_validator("epsilon_sweep")
    @classmethod
    def _positive(cls, v):
        if any(e < 1 for e in v):
            raise ValueError("epsilon_sweep 中的 ε 必须 >= 1")
        return v


# --- 合成数据 ---

class Transport(str, Enum):
    TCP = "tcp"
    UDP = "udp"


class ConnectionStyle(str, Enum):
    PERSISTENT = "persistent"
    PER_MESSAGE = "per_message"


class DeviceArchetype(BaseModel):
    name: str
    transport: Transport = Transport.TCP
    dst_ports: Dict[int, float]
    payload_mean: float = Field(gt=0)
    payload_jitter: float = Field(default=0.0, ge=0)
    entropy_mean: float = Field(ge=0, le=8)
    entropy_jitter: float = Field(default=0.05, ge=0)
    period: float = Field(gt=0)
    period_jitter: float = Field(default=0.05, ge=0)
    packet_jitter: float = Field(default=0.02, ge=0)
    connection: ConnectionStyle = ConnectionStyle.PERSISTENT
    ttl: int = Field(default=64, ge=1, le=255)
    tos: int = Field(default=0, ge=0, le=255)
    tcp_window: int = Field(default=29200, ge=0, le=65535)

    @field_validator("dst_ports")
    @classmethod
    def _distribution(cls, v):
        if not v or abs(sum(v.values()) - 1.0) > 1e-9:
            raise ValueError("dst_ports 概率之和必须为 1")
        return v


class AttackKind(str, Enum):
    TELNET_SCAN = "TelnetScan"
    SYN_FLOOD = "SynFlood"
    UDP_FLOOD = "UdpFlood"
    ACK_FLOOD = "AckFlood"
    ICMP_FLOOD = "IcmpFlood"
    CNC_HEARTBEAT = "CncHeartbeat"
    PORT_SWEEP = "PortSweep"


class AttackRole(str, Enum):
    SOURCE = "source"
    TARGET = "target"


class AttackEpisode(BaseModel):
    """start/end 为相对于轨迹第一个包的秒数"""
    kind: AttackKind
    start: float = Field(ge=0)
    end: float
    rate: float = Field(gt=0)
    role: AttackRole = AttackRole.SOURCE
    max_packets: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _interval(self):
        if self.end <= self.start:
            raise ValueError("攻击区间 end 必须大于 start")
        return self


class AttackTemplate(BaseModel):
    """以攻击段时长的比例描述的攻击，按设备换算成 AttackEpisode"""
    kind: AttackKind
    start_frac: float = Field(ge=0, le=1)
    end_frac: float = Field(ge=0, le=1)
    rate: float = Field(gt=0)
    role: AttackRole = AttackRole.SOURCE
    max_packets: Optional[int] = Field(default=None, ge=1)

    def to_episode(self, duration: float) -> AttackEpisode:
        return AttackEpisode(kind=self.kind, start=self.start_frac * duration, end=self.end_frac * duration,
                             rate=self.rate, role=self.role, max_packets=self.max_packets)


def _default_attacks() -> List[AttackTemplate]:
    return [
        AttackTemplate(kind=AttackKind.TELNET_SCAN, start_frac=0.10, end_frac=0.30, rate=20.0, max_packets=200),
        AttackTemplate(kind=AttackKind.UDP_FLOOD, start_frac=0.40, end_frac=0.45, rate=1000.0, max_packets=300),
        AttackTemplate(kind=AttackKind.CNC_HEARTBEAT, start_frac=0.0, end_frac=1.0, rate=0.2, max_packets=40),
    ]


class FleetSpec(BaseModel):
    archetype_names: List[str] = Field(default_factory=lambda: ["mqtt_telemetry", "coap_meter", "rtsp_camera"])
    custom_archetypes: List[DeviceArchetype] = Field(default_factory=list)
    instances_per_archetype: int = Field(default=5, ge=1)
    train_packets: int = Field(default=2000, ge=1)
    validation_packets: int = Field(default=1000, ge=0)
    attack_packets: int = Field(default=1500, ge=0)
    attacks: List[AttackTemplate] = Field(default_factory=_default_attacks)


# --- 实验配置 ---

class DeviceEntry(BaseModel):
    device_id: str
    archetype: Optional[str] = None
    train: Path
    validation_normal: Optional[Path] = None
    validation_attack: List[Path] = Field(default_factory=list)

    def paths(self) -> List[Path]:
        out = [self.train]
        if self.validation_normal:
            out.append(self.validation_normal)
        return out + list(self.validation_attack)


class CohortConfig(BaseModel):
    devices: List[DeviceEntry]

    @field_validator("devices")
    @classmethod
    def _unique(cls, v):
        ids = [d.device_id for d in v]
        if len(set(ids)) != len(ids):
            raise ValueError("device_id 必须唯一")
        return v


class ExperimentConfig(BaseModel):
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    scheme: Scheme = Scheme.HIERARCHICAL
    output_dir: Path = Path("runs/default")
    train: TrainConfig = Field(default_factory=TrainConfig)
    fl: FLConfig = Field(default_factory=FLConfig)
    tune: TuneConfig = Field(default_factory=TuneConfig)
    fingerprint: FingerprintConfig = Field(default_factory=FingerprintConfig)
    fleet: FleetSpec = Field(default_factory=FleetSpec)
    cohort: Optional[CohortConfig] = None

    def missing_paths(self) -> List[Path]:
        if self.cohort is None:
            return []
        return [p for d in self.cohort.devices for p in d.paths() if not Path(p).exists()]


# --- 检测 ---

class ThresholdRecord(BaseModel):
    device_id: str
    threshold: float = Field(ge=0)
    source: str
    max_index: int = Field(ge=0)


class ConfusionCounts(BaseModel):
    tp: int = Field(default=0, ge=0)
    fn: int = Field(default=0, ge=0)
    fp: int = Field(default=0, ge=0)
    tn: int = Field(default=0, ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn


class DetectionMetrics(BaseModel):
    accuracy: float
    f1: float
    mcc: float
    f1_degenerate: bool = False
    mcc_degenerate: bool = False


class PacketVerdict(BaseModel):
    timestamp: float
    mse: float
    anomalous: bool
    label: Label
    attack_kind: Optional[str] = None


class DetectionReport(BaseModel):
    device_id: str
    dataset: str
    threshold: float
    counts: ConfusionCounts
    metrics: Optional[DetectionMetrics] = None
    fp_rate: Optional[float] = None
    recall_by_kind: Dict[str, float] = Field(default_factory=dict)
    skipped_unlabeled: int = 0
    packets: List[PacketVerdict] = Field(default_factory=list, exclude=True)


# --- 聚类 ---

class KScore(BaseModel):
    k: int
    silhouette: float
    davies_bouldin: float
    s_dbw: float
    inertia: float


class KSelection(BaseModel):
    k: int
    silhouette_argmax: int
    davies_bouldin_argmin: int
    s_dbw_argmin: int
    unanimous: bool
    rule: str = "argmax silhouette, smallest k on ties"


class ClusterAssignment(BaseModel):
    labels: List[int]
    k: int
    centroids: List[List[float]]
    scores: List[KScore]
    selection: KSelection
    client_ids: List[int] = Field(default_factory=list)
    device_ids: List[str] = Field(default_factory=list)
    epsilon: Optional[int] = None
    explained_variance_ratio: List[float] = Field(default_factory=list)
    n_components: int = 0
    projection: List[List[float]] = Field(default_factory=list)
    external: Optional[Dict[str, float]] = None
    external_by_k: Dict[int, Dict[str, float]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_labels(self):
        if any(not 0 <= label < self.k for label in self.labels):
            raise ValueError("簇标签越界")
        if set(self.labels) != set(range(self.k)):
            raise ValueError("存在空簇")
        return self

    def members(self, cluster: int) -> List[int]:
        return [i for i, label in enumerate(self.labels) if label == cluster]


# --- 运行清单 ---

class StageRecord(BaseModel):
    seed: Optional[int] = None
    outputs: Dict[str, str] = Field(default_factory=dict)


class RunManifest(BaseModel):
    versions: Dict[str, str] = Field(default_factory=dict)
    config_hash: str = ""
    stages: Dict[str, StageRecord] = Field(default_factory=dict)
