"""pcap / 记录文件读取。

只保留 IPv4 报文：IPv6、ARP 以及其他以太类型全部丢弃并计数。
802.1Q VLAN 标签由 dpkt 剥离，带标签的帧只计数。
"""
import socket
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

import dpkt
import numpy as np
from pydantic import ValidationError

from .core.log import logger
from .exceptions import PcapFormatError
from .models import IngestStats, IpProto, PacketRecord

ETH_TYPE_IP = 0x0800
ETH_TYPE_ARP = 0x0806
ETH_TYPE_IP6 = 0x86DD

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
PCAP_MAGIC_US_SWAPPED = 0xD4C3B2A1
PCAP_MAGIC_NS_SWAPPED = 0x4D3CB2A1

RECORD_SUFFIXES = {".jsonl", ".records", ".ndjson"}

_IP_FLAG_BITS = (("R", dpkt.ip.IP_RF), ("DF", dpkt.ip.IP_DF), ("MF", dpkt.ip.IP_MF))
_TCP_FLAG_BITS = (
    ("F", dpkt.tcp.TH_FIN), ("S", dpkt.tcp.TH_SYN), ("R", dpkt.tcp.TH_RST), ("P", dpkt.tcp.TH_PUSH),
    ("A", dpkt.tcp.TH_ACK), ("U", dpkt.tcp.TH_URG), ("E", dpkt.tcp.TH_ECE), ("C", dpkt.tcp.TH_CWR),
)
_PROTO_MAP = {dpkt.ip.IP_PROTO_TCP: IpProto.TCP, dpkt.ip.IP_PROTO_UDP: IpProto.UDP, dpkt.ip.IP_PROTO_ICMP: IpProto.ICMP}


def keep_packet(ethertype: int) -> bool:
    """只有 IPv4 被保留；ARP、IPv6 与其他以太类型一律丢弃"""
    return ethertype == ETH_TYPE_IP


def shannon_entropy(data: bytes) -> float:
    """整包字节的香农熵（以 2 为底），空输入返回 0"""
    if not data:
        return 0.0
    _, counts = np.unique(np.frombuffer(data, dtype=np.uint8), return_counts=True)
    p = counts / counts.sum()
    h = float(-np.sum(p * np.log2(p)))
    return h if h > 0 else 0.0


def _open_pcap(f) -> tuple:
    raw = f.read(dpkt.pcap.FileHdr.__hdr_len__)
    if len(raw) < dpkt.pcap.FileHdr.__hdr_len__:
        raise PcapFormatError("pcap 全局头不完整")
    hdr = dpkt.pcap.FileHdr(raw)
    if hdr.magic in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
        pkt_hdr_cls = dpkt.pcap.PktHdr
    elif hdr.magic in (PCAP_MAGIC_US_SWAPPED, PCAP_MAGIC_NS_SWAPPED):
        hdr = dpkt.pcap.LEFileHdr(raw)
        pkt_hdr_cls = dpkt.pcap.LEPktHdr
    else:
        raise PcapFormatError(f"无法识别的 pcap magic: 0x{hdr.magic:08x}")
    divisor = 1e9 if hdr.magic in (PCAP_MAGIC_NS, PCAP_MAGIC_NS_SWAPPED) else 1e6
    return pkt_hdr_cls, divisor


def _dissect(buf: bytes, wire_len: int, ts: float, stats: IngestStats) -> Optional[PacketRecord]:
    eth = dpkt.ethernet.Ethernet(buf)
    if getattr(eth, "vlan_tags", None):
        stats.vlan_tagged += 1
    if not keep_packet(eth.type):
        stats.drop(eth.type)
        return None
    ip = eth.data
    if not isinstance(ip, dpkt.ip.IP):
        raise dpkt.UnpackError("IPv4 头无法解析")

    proto = _PROTO_MAP.get(ip.p, IpProto.OTHER)
    fields = dict(
        timestamp=ts,
        frame_len=wire_len,
        ip_tos=ip.tos,
        ip_flags=[name for name, bit in _IP_FLAG_BITS if ip.off & bit],
        ip_ttl=ip.ttl,
        ip_proto=proto,
        packet_bytes=buf,
        src_ip=socket.inet_ntoa(ip.src),
        dst_ip=socket.inet_ntoa(ip.dst),
    )
    if proto is IpProto.TCP:
        tcp = ip.data
        if not isinstance(tcp, dpkt.tcp.TCP):
            raise dpkt.UnpackError("TCP 头被截断")
        flags = [name for name, bit in _TCP_FLAG_BITS if tcp.flags & bit]
        # NS 位在数据偏移字节的最低位，dpkt 的 flags 只覆盖低 8 位
        if bytes(tcp)[12] & 0x01:
            flags.append("N")
        fields.update(src_port=tcp.sport, dst_port=tcp.dport, tcp_flags=flags, tcp_win=tcp.win)
    elif proto is IpProto.UDP:
        udp = ip.data
        if not isinstance(udp, dpkt.udp.UDP):
            raise dpkt.UnpackError("UDP 头被截断")
        fields.update(src_port=udp.sport, dst_port=udp.dport)
    return PacketRecord(**fields)


def read_pcap(path: Union[str, Path], stats: Optional[IngestStats] = None) -> Iterator[PacketRecord]:
    """逐帧读取经典 pcap 文件。单帧损坏只计数告警，全局头损坏直接抛出 PcapFormatError。"""
    stats = stats if stats is not None else IngestStats()
    with open(path, "rb") as f:
        pkt_hdr_cls, divisor = _open_pcap(f)
        hdr_len = pkt_hdr_cls.__hdr_len__
        index = 0
        while True:
            raw = f.read(hdr_len)
            if not raw:
                break
            if len(raw) < hdr_len:
                stats.malformed += 1
                logger.warning(f"{path}: 文件末尾的帧头不完整，已忽略")
                break
            ph = pkt_hdr_cls(raw)
            buf = f.read(ph.caplen)
            stats.frames += 1
            index += 1
            if len(buf) < ph.caplen:
                stats.malformed += 1
                logger.warning(f"{path}: 第 {index} 帧数据不完整，已忽略")
                break
            ts = ph.tv_sec + ph.tv_usec / divisor
            try:
                record = _dissect(buf, max(ph.len, len(buf)), ts, stats)
            except (dpkt.UnpackError, ValidationError, ValueError) as e:
                stats.malformed += 1
                logger.warning(f"{path}: 第 {index} 帧解析失败，已跳过: {e}")
                continue
            if record is not None:
                stats.kept += 1
                yield record


def read_records(path: Union[str, Path], stats: Optional[IngestStats] = None) -> Iterator[PacketRecord]:
    """读取逐行 JSON 记录文件（synth 模块的输出格式）"""
    stats = stats if stats is not None else IngestStats()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            stats.frames += 1
            try:
                record = PacketRecord.model_validate_json(line)
            except ValidationError as e:
                stats.unparseable_lines += 1
                logger.warning(f"{path}:{lineno} 记录无法解析，已跳过: {e.error_count()} 个错误")
                continue
            stats.kept += 1
            yield record


def write_records(records: Iterable[PacketRecord], path: Union[str, Path]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(record.model_dump_json(exclude_none=True))
            f.write("\n")
            count += 1
    return count


def sniff_format(path: Union[str, Path]) -> str:
    """根据文件头 magic 判断是 pcap 还是记录文件"""
    with open(path, "rb") as f:
        head = f.read(4)
    if len(head) == 4:
        magic = int.from_bytes(head, "big")
        if magic in (PCAP_MAGIC_US, PCAP_MAGIC_NS, PCAP_MAGIC_US_SWAPPED, PCAP_MAGIC_NS_SWAPPED):
            return "pcap"
    if Path(path).suffix in RECORD_SUFFIXES or head[:1] == b"{":
        return "records"
    raise PcapFormatError(f"{path}: 既不是 pcap 也不是记录文件")


def read_any(path: Union[str, Path], stats: Optional[IngestStats] = None) -> Iterator[PacketRecord]:
    if sniff_format(path) == "pcap":
        return read_pcap(path, stats)
    return read_records(path, stats)
