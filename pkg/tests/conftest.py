import socket
import struct
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pytest

from clusterfl.core.utils import derive_seed
from clusterfl.features import featurize
from clusterfl.fl import ClientState
from clusterfl.ingest import read_records
from clusterfl.manager import split_train_eval
from clusterfl.models import FleetSpec, OptimizerFamily, OptimizerSpec, Scheme
from clusterfl.nn import build_autoencoder
from clusterfl.synth import make_fleet

ETH_IPV4 = 0x0800
ETH_ARP = 0x0806
ETH_IPV6 = 0x86DD
ETH_VLAN = 0x8100

MAC_A = bytes.fromhex("020000000001")
MAC_B = bytes.fromhex("020000000002")


def ethernet(ethertype: int, payload: bytes, vlan: Optional[int] = None) -> bytes:
    head = MAC_A + MAC_B
    if vlan is not None:
        head += struct.pack("!HH", ETH_VLAN, vlan & 0x0FFF)
    return head + struct.pack("!H", ethertype) + payload


def ipv4(proto: int, payload: bytes, src: str = "10.0.0.1", dst: str = "10.0.0.2", ttl: int = 64,
         tos: int = 0, flags: int = 0x4000) -> bytes:
    """flags 为 16 位 flags/fragment 字段，默认 DF"""
    total = 20 + len(payload)
    return struct.pack("!BBHHHBBH4s4s", 0x45, tos, total, 1, flags, ttl, proto, 0,
                       socket.inet_aton(src), socket.inet_aton(dst)) + payload


def tcp(sport: int, dport: int, flags: int, win: int, payload: bytes = b"", ns: bool = False) -> bytes:
    offset = (5 << 4) | (1 if ns else 0)
    return struct.pack("!HHIIBBHHH", sport, dport, 1, 0, offset, flags, win, 0, 0) + payload


def udp(sport: int, dport: int, payload: bytes = b"") -> bytes:
    return struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload


def icmp_echo(payload: bytes = b"") -> bytes:
    return struct.pack("!BBHHH", 8, 0, 0, 1, 1) + payload


def write_pcap(path: Path, frames: Sequence[Tuple[float, bytes]], nanosecond: bool = False,
               little_endian: bool = True, orig_len: Optional[List[int]] = None) -> Path:
    """经典 pcap：24 字节全局头 + 每帧 16 字节帧头"""
    endian = "<" if little_endian else ">"
    magic = 0xA1B23C4D if nanosecond else 0xA1B2C3D4
    divisor = 1_000_000_000 if nanosecond else 1_000_000
    out = [struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, 65535, 1)]
    for i, (ts, frame) in enumerate(frames):
        sec = int(ts)
        frac = int(round((ts - sec) * divisor))
        wire = orig_len[i] if orig_len else len(frame)
        out.append(struct.pack(endian + "IIII", sec, frac, len(frame), wire))
        out.append(frame)
    path.write_bytes(b"".join(out))
    return path


@pytest.fixture
def pcap_writer(tmp_path):
    def _write(frames, name="capture.pcap", **kwargs):
        return write_pcap(tmp_path / name, frames, **kwargs)
    return _write


@pytest.fixture
def tiny_fleet_spec():
    return FleetSpec(instances_per_archetype=3, train_packets=300, validation_packets=150, attack_packets=300)


@pytest.fixture
def tiny_fleet(tmp_path, tiny_fleet_spec):
    return make_fleet(tiny_fleet_spec, 7, tmp_path / "fleet")


def make_cohort(fleet, scheme: Scheme = Scheme.HIERARCHICAL, seed: int = 0,
                client_opt: Optional[OptimizerSpec] = None) -> List[ClientState]:
    client_opt = client_opt or OptimizerSpec(family=OptimizerFamily.ADAM1, lr=0.005)
    clients = []
    for client_id, entry in enumerate(fleet.cohort.devices):
        matrix, _ = featurize(read_records(entry.train), scheme, entry.device_id)
        train, evaluation = split_train_eval(matrix, derive_seed(seed, f"split/{entry.device_id}"))
        clients.append(ClientState(client_id=client_id, device_id=entry.device_id, train_data=train,
                                   eval_data=evaluation, client_opt=client_opt))
    return clients


@pytest.fixture
def small_net():
    return build_autoencoder(27, 123)


@pytest.fixture
def random_rows():
    def _rows(n: int, dim: int = 27, seed: int = 0) -> np.ndarray:
        return np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, dim))
    return _rows


@pytest.fixture
def cohort_builder():
    return make_cohort
