"""桌面规模的合成 IoT 设备群：按设备原型生成正常流量，并注入带真值标签的攻击片段。

合成记录不携带真实载荷，只带预先算好的整包熵 (entropy 字段)。
每台设备生成一条连续轨迹，按包数依次切成 train / validation_normal / 攻击背景三段。
"""
import ipaddress
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .core.log import logger
from .core.utils import derive_seed, make_rng, write_json
from .exceptions import ConfigError
from .ingest import write_records
from .models import (
    AttackEpisode,
    AttackKind,
    AttackRole,
    CohortConfig,
    ConnectionStyle,
    DeviceArchetype,
    DeviceEntry,
    FleetSpec,
    IpProto,
    Label,
    PacketRecord,
    Transport,
)

ETH_IP_HEADER = 14 + 20
TCP_HEADER = 20
UDP_HEADER = 8
ICMP_HEADER = 8
MAX_TCP_PAYLOAD = 1514 - ETH_IP_HEADER - TCP_HEADER
TRACE_EPOCH = 1_700_000_000.0

DEFAULT_ARCHETYPES: Dict[str, DeviceArchetype] = {
    a.name: a for a in (
        DeviceArchetype(
            name="mqtt_telemetry", transport=Transport.TCP, dst_ports={1883: 1.0},
            payload_mean=120, payload_jitter=30, entropy_mean=4.8, entropy_jitter=0.15,
            period=2.0, connection=ConnectionStyle.PERSISTENT, tcp_window=29200,
        ),
        DeviceArchetype(
            name="coap_meter", transport=Transport.UDP, dst_ports={5683: 1.0},
            payload_mean=40, payload_jitter=8, entropy_mean=4.2, entropy_jitter=0.1,
            period=5.0, ttl=64,
        ),
        DeviceArchetype(
            name="rtsp_camera", transport=Transport.TCP, dst_ports={8554: 1.0},
            payload_mean=1400, payload_jitter=40, entropy_mean=7.8, entropy_jitter=0.05,
            period=0.05, connection=ConnectionStyle.PERSISTENT, tcp_window=64240,
        ),
        DeviceArchetype(
            name="mqtt_tls_maintenance", transport=Transport.TCP, dst_ports={8883: 1.0},
            payload_mean=300, payload_jitter=60, entropy_mean=7.2, entropy_jitter=0.1,
            period=30.0, connection=ConnectionStyle.PER_MESSAGE, tcp_window=65535,
        ),
    )
}

# 回包（ACK / SYN-ACK / 响应）的整包熵大致稳定在报文头的熵附近
HEADER_ENTROPY = 3.9
SCAN_PORTS = [80, *range(8000, 8101), 5683]
# 注册端口段里任何原型都不使用、也不在具名分箱中的端口
CNC_PORT = 6667


@dataclass
class DeviceInstance:
    """一台设备实例：原型加上只抽取一次的实例级抖动"""
    device_id: str
    archetype: DeviceArchetype
    ip: str
    peer_ip: str
    local_port: int
    period: float
    payload_scale: float
    inbound_ttl: int

    def record(self, ts: float, outbound: bool, proto: IpProto, frame_len: int, entropy: float,
               local_port: Optional[int] = None, remote_port: Optional[int] = None, tcp_flags: Sequence[str] = (),
               tcp_win: Optional[int] = None, ttl: Optional[int] = None, ip_flags: Sequence[str] = ("DF",),
               tos: Optional[int] = None, peer_ip: Optional[str] = None) -> PacketRecord:
        """从设备视角构造一条记录；outbound 决定地址与端口的方向"""
        peer = peer_ip or self.peer_ip
        ports = {}
        if proto in (IpProto.TCP, IpProto.UDP):
            if outbound:
                ports = {"src_port": local_port, "dst_port": remote_port}
            else:
                ports = {"src_port": remote_port, "dst_port": local_port}
        return PacketRecord(
            timestamp=round(ts, 6),
            frame_len=int(frame_len),
            ip_tos=self.archetype.tos if tos is None else tos,
            ip_flags=tuple(ip_flags),
            ip_ttl=(self.archetype.ttl if outbound else self.inbound_ttl) if ttl is None else ttl,
            ip_proto=proto,
            tcp_flags=tuple(tcp_flags),
            tcp_win=tcp_win if proto is IpProto.TCP else None,
            entropy=round(float(np.clip(entropy, 0.0, 8.0)), 4),
            src_ip=self.ip if outbound else peer,
            dst_ip=peer if outbound else self.ip,
            label=Label.NORMAL,
            **ports,
        )


def make_instance(archetype: DeviceArchetype, device_id: str, index: int, group: int,
                  rng: np.random.Generator) -> DeviceInstance:
    return DeviceInstance(
        device_id=device_id,
        archetype=archetype,
        ip=str(ipaddress.IPv4Address("10.10.0.0") + (group << 8) + index + 10),
        peer_ip=str(ipaddress.IPv4Address("10.20.0.0") + group + 1),
        local_port=int(rng.integers(49152, 65536)),
        period=archetype.period * max(0.2, 1.0 + rng.normal(0.0, archetype.period_jitter)),
        payload_scale=max(0.5, 1.0 + rng.normal(0.0, 0.05)),
        inbound_ttl=int(archetype.ttl - rng.integers(2, 8)),
    )


def _payload(device: DeviceInstance, rng: np.random.Generator) -> int:
    a = device.archetype
    size = rng.normal(a.payload_mean * device.payload_scale, a.payload_jitter)
    return int(np.clip(round(size), 1, MAX_TCP_PAYLOAD))


def _payload_entropy(device: DeviceInstance, rng: np.random.Generator) -> float:
    a = device.archetype
    return a.entropy_mean + rng.normal(0.0, a.entropy_jitter)


def _ack_entropy(rng: np.random.Generator) -> float:
    return HEADER_ENTROPY + rng.normal(0.0, 0.05)


def _message_packets(device: DeviceInstance, ts: float, rng: np.random.Generator) -> List[PacketRecord]:
    """一次业务消息对应的报文序列"""
    a = device.archetype
    dst = int(rng.choice(list(a.dst_ports), p=list(a.dst_ports.values())))
    delay = lambda: float(rng.uniform(0.0005, 0.003))  # noqa: E731
    out = []
    if a.transport is Transport.UDP:
        size = _payload(device, rng)
        out.append(device.record(ts, True, IpProto.UDP, ETH_IP_HEADER + UDP_HEADER + size,
                                 _payload_entropy(device, rng), local_port=device.local_port, remote_port=dst))
        # CoAP 风格的应答
        reply = max(4, int(size * 0.25))
        out.append(device.record(ts + delay(), False, IpProto.UDP, ETH_IP_HEADER + UDP_HEADER + reply,
                                 _ack_entropy(rng) + 0.2, local_port=device.local_port, remote_port=dst))
        return out

    peer_win = 64240
    tcp_len = ETH_IP_HEADER + TCP_HEADER
    if a.connection is ConnectionStyle.PERSISTENT:
        size = _payload(device, rng)
        out.append(device.record(ts, True, IpProto.TCP, tcp_len + size, _payload_entropy(device, rng),
                                 local_port=device.local_port, remote_port=dst, tcp_flags=("P", "A"), tcp_win=a.tcp_window))
        out.append(device.record(ts + delay(), False, IpProto.TCP, tcp_len, _ack_entropy(rng),
                                 local_port=device.local_port, remote_port=dst, tcp_flags=("A",), tcp_win=peer_win))
        return out

    # 建连 - 发送 - 关闭
    sport = int(rng.integers(49152, 65536))
    t = ts
    steps = [
        (True, ("S",), 0), (False, ("S", "A"), 0), (True, ("A",), 0),
        (True, ("P", "A"), _payload(device, rng)), (False, ("A",), 0),
        (True, ("F", "A"), 0), (False, ("F", "A"), 0), (True, ("A",), 0),
    ]
    for outbound, flags, size in steps:
        entropy = _payload_entropy(device, rng) if size else _ack_entropy(rng)
        win = a.tcp_window if outbound else peer_win
        out.append(device.record(t, outbound, IpProto.TCP, tcp_len + size, entropy,
                                 local_port=sport, remote_port=dst, tcp_flags=flags, tcp_win=win))
        t += delay()
    return out


def normal_trace(device: DeviceInstance, n_packets: int, rng: np.random.Generator, start: float = TRACE_EPOCH) -> List[PacketRecord]:
    """按实例周期与逐包抖动生成恰好 n_packets 个正常报文，按时间排序"""
    packets: List[PacketRecord] = []
    ts = start
    while len(packets) < n_packets:
        packets.extend(_message_packets(device, ts, rng))
        gap = device.period * (1.0 + rng.normal(0.0, device.archetype.packet_jitter))
        ts += max(gap, device.period * 0.1)
    packets.sort(key=lambda r: r.timestamp)
    return packets[:n_packets]


def _flow(outbound: bool, sport: int, dport: int) -> dict:
    """把攻击者视角的 (sport, dport) 换成设备视角的本地/远端端口"""
    if outbound:
        return {"local_port": sport, "remote_port": dport}
    return {"local_port": dport, "remote_port": sport}


def _attack_packet(kind: AttackKind, device: DeviceInstance, ts: float, role: AttackRole, seq: int,
                   rng: np.random.Generator) -> List[PacketRecord]:
    outbound = role is AttackRole.SOURCE
    peer = str(ipaddress.IPv4Address("10.30.0.0") + int(rng.integers(1, 65000)))
    tcp_len = ETH_IP_HEADER + TCP_HEADER
    rand_port = int(rng.integers(1024, 65536))
    rand_win = int(rng.integers(1024, 65536))
    flood_port = 80 if outbound else next(iter(device.archetype.dst_ports))

    if kind is AttackKind.TELNET_SCAN:
        dport = 23 if rng.random() < 0.9 else 2323
        return [device.record(ts, outbound, IpProto.TCP, tcp_len, 4.5 + rng.normal(0, 0.1), tcp_flags=("S",),
                              tcp_win=rand_win, ip_flags=(), peer_ip=peer, **_flow(outbound, rand_port, dport))]
    if kind is AttackKind.PORT_SWEEP:
        dport = SCAN_PORTS[seq % len(SCAN_PORTS)]
        return [device.record(ts, outbound, IpProto.TCP, tcp_len, 4.4 + rng.normal(0, 0.1), tcp_flags=("S",),
                              tcp_win=1024, ip_flags=(), peer_ip=peer, **_flow(outbound, rand_port, dport))]
    if kind is AttackKind.SYN_FLOOD:
        return [device.record(ts, outbound, IpProto.TCP, tcp_len + 20, 4.7 + rng.normal(0, 0.1), tcp_flags=("S",),
                              tcp_win=rand_win, peer_ip=peer, **_flow(outbound, rand_port, flood_port))]
    if kind is AttackKind.ACK_FLOOD:
        return [device.record(ts, outbound, IpProto.TCP, tcp_len + 512, 7.6 + rng.normal(0, 0.03), tcp_flags=("A",),
                              tcp_win=rand_win, peer_ip=peer, **_flow(outbound, rand_port, flood_port))]
    if kind is AttackKind.UDP_FLOOD:
        # 512 字节随机载荷，TTL 64，TOS 0
        dport = int(rng.integers(1, 65536))
        return [device.record(ts, outbound, IpProto.UDP, ETH_IP_HEADER + UDP_HEADER + 512, 7.6 + rng.normal(0, 0.03),
                              ttl=64, tos=0, peer_ip=peer, **_flow(outbound, rand_port, dport))]
    if kind is AttackKind.ICMP_FLOOD:
        return [device.record(ts, outbound, IpProto.ICMP, ETH_IP_HEADER + ICMP_HEADER + 56, 5.0 + rng.normal(0, 0.1),
                              peer_ip=peer)]
    if kind is AttackKind.CNC_HEARTBEAT:
        # 发往固定远端端口的小包，外加对端 ACK
        cnc = {"peer_ip": "10.99.0.1", "local_port": device.local_port ^ 0x1, "remote_port": CNC_PORT}
        return [
            device.record(ts, True, IpProto.TCP, tcp_len + 2, 3.7 + rng.normal(0, 0.05), tcp_flags=("P", "A"),
                          tcp_win=device.archetype.tcp_window, **cnc),
            device.record(ts + float(rng.uniform(0.01, 0.05)), False, IpProto.TCP, tcp_len, _ack_entropy(rng),
                          tcp_flags=("A",), tcp_win=64240, **cnc),
        ]
    raise ValueError(f"未知攻击类型: {kind}")


def _episode_packets(episode: AttackEpisode, device: DeviceInstance, origin: float, duration: float,
                     rng: np.random.Generator) -> List[PacketRecord]:
    """固定速率加泊松抖动：包间隔服从均值 1/rate 的指数分布"""
    end = min(episode.end, duration)
    if episode.start >= end:
        logger.warning(f"{device.device_id}: 攻击 {episode.kind.value} 区间超出轨迹范围，已跳过")
        return []
    packets: List[PacketRecord] = []
    t = episode.start + rng.exponential(1.0 / episode.rate)
    seq = 0
    while t < end and (episode.max_packets is None or seq < episode.max_packets):
        for p in _attack_packet(episode.kind, device, origin + t, episode.role, seq, rng):
            packets.append(p.model_copy(update={"label": Label.ATTACK, "attack_kind": episode.kind.value}))
        seq += 1
        t += rng.exponential(1.0 / episode.rate)
    return packets


def inject_attacks(
    trace: Sequence[PacketRecord],
    episodes: Sequence[AttackEpisode],
    seed: int,
    device: Optional[DeviceInstance] = None,
) -> Tuple[List[PacketRecord], Dict[str, int]]:
    """把攻击片段按时间戳插入轨迹。原有报文标记为 normal，注入的报文标记为 attack。

    返回 (带标签的轨迹, 标签计数)。episode 的时间相对于轨迹第一个包。
    """
    labeled = [r.model_copy(update={"label": Label.NORMAL, "attack_kind": None}) for r in trace]
    counts = {Label.NORMAL.value: len(labeled), Label.ATTACK.value: 0}
    if not episodes:
        return labeled, counts
    if device is None:
        device = make_instance(next(iter(DEFAULT_ARCHETYPES.values())), "attack-host", 0, 255, make_rng(seed))
    origin = labeled[0].timestamp if labeled else TRACE_EPOCH
    duration = (labeled[-1].timestamp - origin) if len(labeled) > 1 else max(e.end for e in episodes)
    rng = make_rng(seed)
    injected: List[PacketRecord] = []
    for episode in episodes:
        injected.extend(_episode_packets(episode, device, origin, duration, rng))
    counts[Label.ATTACK.value] = len(injected)
    by_kind: Dict[str, int] = {}
    for r in injected:
        by_kind[r.attack_kind] = by_kind.get(r.attack_kind, 0) + 1
    counts.update({f"attack/{k}": v for k, v in sorted(by_kind.items())})
    # 时间相同时正常包在前，排序稳定
    merged = sorted(labeled + injected, key=lambda r: (r.timestamp, r.label is Label.ATTACK))
    return merged, counts


def resolve_archetypes(spec: FleetSpec) -> List[DeviceArchetype]:
    catalogue = dict(DEFAULT_ARCHETYPES)
    catalogue.update({a.name: a for a in spec.custom_archetypes})
    missing = [name for name in spec.archetype_names if name not in catalogue]
    if missing:
        raise ConfigError(f"未知的设备原型: {missing}，可选: {sorted(catalogue)}")
    return [catalogue[name] for name in spec.archetype_names]


@dataclass
class FleetResult:
    cohort: CohortConfig
    labels: pd.DataFrame
    episodes: dict


def make_fleet(spec: FleetSpec, seed: int, out_dir: Union[str, Path]) -> FleetResult:
    """生成整个设备群并写盘：

    out_dir/devices/<device_id>/{train,validation_normal,validation_attack}.jsonl
    out_dir/fleet_labels.csv   (device_id, archetype)
    out_dir/episodes.json      每台设备的攻击片段与标签计数
    """
    archetypes = resolve_archetypes(spec)
    if len(archetypes) < 2:
        logger.warning("设备原型少于 2 个，聚类实验没有意义")
    out_dir = Path(out_dir)
    devices, label_rows, manifest = [], [], {}
    for group, archetype in enumerate(archetypes):
        for index in range(spec.instances_per_archetype):
            device_id = f"{archetype.name}_{index:02d}"
            rng = make_rng(derive_seed(seed, f"synth/{device_id}"))
            device = make_instance(archetype, device_id, index, group, rng)
            total = spec.train_packets + spec.validation_packets + spec.attack_packets
            trace = normal_trace(device, total, rng)
            train = trace[:spec.train_packets]
            validation = trace[spec.train_packets:spec.train_packets + spec.validation_packets]
            background = trace[spec.train_packets + spec.validation_packets:]

            origin = background[0].timestamp if background else TRACE_EPOCH
            span = (background[-1].timestamp - origin) if len(background) > 1 else 1.0
            episodes = [t.to_episode(span) for t in spec.attacks if t.end_frac > t.start_frac]
            attack_trace, counts = inject_attacks(background, episodes, derive_seed(seed, f"attack/{device_id}"), device)

            base = out_dir / "devices" / device_id
            entry = DeviceEntry(device_id=device_id, archetype=archetype.name, train=base / "train.jsonl")
            write_records(train, entry.train)
            if validation:
                entry.validation_normal = base / "validation_normal.jsonl"
                write_records(validation, entry.validation_normal)
            if attack_trace:
                entry.validation_attack = [base / "validation_attack.jsonl"]
                write_records(attack_trace, entry.validation_attack[0])

            devices.append(entry)
            label_rows.append((device_id, archetype.name))
            manifest[device_id] = {
                "archetype": archetype.name,
                "episodes": [e.model_dump(mode="json") for e in episodes],
                "label_counts": counts,
            }
            logger.info(f"已生成设备 {device_id}: 训练 {len(train)} / 验证 {len(validation)} / 攻击段 {len(attack_trace)}")

    labels = pd.DataFrame(label_rows, columns=["device_id", "archetype"])
    out_dir.mkdir(parents=True, exist_ok=True)
    labels.to_csv(out_dir / "fleet_labels.csv", index=False)
    write_json(out_dir / "episodes.json", manifest)
    return FleetResult(cohort=CohortConfig(devices=devices), labels=labels, episodes=manifest)
