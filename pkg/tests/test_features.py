import math

import numpy as np
import pytest

from clusterfl.core.ports import HIERARCHY_BINS, ThreeRange
from clusterfl.features import (
    discretize_hierarchical,
    discretize_three_range,
    encode,
    extract_raw,
    feature_columns,
    featurize,
    read_feature_matrix,
    write_feature_matrix,
)
from clusterfl.models import IngestStats, IpProto, Label, PacketRecord, Scheme


def _record(ts=0.0, proto=IpProto.TCP, **kwargs):
    fields = dict(timestamp=ts, frame_len=100, ip_tos=0, ip_ttl=64, ip_proto=proto, entropy=4.0)
    if proto in (IpProto.TCP, IpProto.UDP):
        fields.update(src_port=50000, dst_port=80)
    if proto is IpProto.TCP:
        fields.update(tcp_win=1000)
    fields.update(kwargs)
    return PacketRecord(**fields)


def test_feature_dimensions():
    assert len(feature_columns(Scheme.THREE_RANGE)) == 27
    assert len(feature_columns(Scheme.HIERARCHICAL)) == 69
    assert Scheme.THREE_RANGE.dim == 27
    assert Scheme.HIERARCHICAL.dim == 69
    assert len(HIERARCHY_BINS) == 24


def test_frozen_column_order():
    columns = feature_columns(Scheme.THREE_RANGE)
    assert columns == [
        "len", "iat", "h", "ip_tos", "ip_ttl", "tcp_win",
        "ip_flag_R", "ip_flag_DF", "ip_flag_MF",
        "ip_proto_TCP", "ip_proto_UDP", "ip_proto_ICMP",
        "tcp_flag_F", "tcp_flag_S", "tcp_flag_R", "tcp_flag_P", "tcp_flag_A",
        "tcp_flag_U", "tcp_flag_E", "tcp_flag_C", "tcp_flag_N",
        "src_port_System", "src_port_User", "src_port_Dynamic",
        "dst_port_System", "dst_port_User", "dst_port_Dynamic",
    ]
    hierarchical = feature_columns(Scheme.HIERARCHICAL)
    assert hierarchical[21] == "src_port_mqttPorts"
    assert hierarchical[-1] == "dst_port_nonprivilegedPorts"


@pytest.mark.parametrize("port, expected", [
    (0, ThreeRange.SYSTEM), (1023, ThreeRange.SYSTEM), (1024, ThreeRange.USER),
    (49151, ThreeRange.USER), (49152, ThreeRange.DYNAMIC), (65535, ThreeRange.DYNAMIC),
])
def test_three_range_boundaries(port, expected):
    assert discretize_three_range(port) is expected


@pytest.mark.parametrize("port, expected", [
    (512, "mailPorts"),       # 同时属于 remoteExecPorts
    (13, "authPorts"),        # 同时属于 timePorts
    (593, "httpPorts"),       # 同时属于 RPCPorts
    (750, "authPorts"),       # 同时属于 kerberosPorts
    (1883, "mqttPorts"),
    (8883, "mqttPorts"),
    (5684, "coapPorts"),
    (8002, "rtspPorts"),
    (8080, "httpPorts"),
    (138, "netbiosPorts"),
    (514, "remoteExecPorts"),
    (999, "privilegedPorts"),
    (1024, "nonprivilegedPorts"),
    (65535, "nonprivilegedPorts"),
])
def test_hierarchy_precedence(port, expected):
    assert discretize_hierarchical(port) == expected


def test_encode_tcp_values():
    rec = _record(frame_len=1514, entropy=4.0, ip_tos=255, ip_ttl=51, tcp_win=65535,
                  ip_flags=("DF",), tcp_flags=("S", "A"), src_port=50000, dst_port=80)
    raw = extract_raw(rec, prev_ts=-(math.e - 1.0))
    vec = encode(raw, Scheme.THREE_RANGE)
    assert vec.dim == 27
    expected = np.zeros(27)
    expected[:6] = [1.0, 1.0, 0.5, 1.0, 0.2, 1.0]
    expected[7] = 1.0            # DF
    expected[9] = 1.0            # TCP
    expected[13] = expected[16] = 1.0   # S, A
    expected[23] = 1.0           # src Dynamic
    expected[24] = 1.0           # dst System
    np.testing.assert_allclose(vec.values, expected, atol=1e-12)


def test_encode_icmp_and_other_have_no_port_bits():
    icmp = encode(extract_raw(_record(proto=IpProto.ICMP), None), Scheme.HIERARCHICAL)
    assert icmp.values[11] == 1.0
    assert icmp.values[21:].sum() == 0.0
    other = encode(extract_raw(_record(proto=IpProto.OTHER), None), Scheme.HIERARCHICAL)
    assert other.values[9:12].sum() == 0.0
    assert other.values[5] == 0.0


def test_entropy_falls_back_to_packet_bytes():
    rec = _record(proto=IpProto.ICMP, entropy=None, frame_len=256, packet_bytes=bytes(range(256)))
    raw = extract_raw(rec, None)
    assert raw.h == pytest.approx(8.0)


def test_featurize_iat_and_out_of_order_clamp():
    records = [_record(ts=10.0), _record(ts=10.5), _record(ts=10.25), _record(ts=11.5, label=Label.ATTACK,
                                                                                 attack_kind="SynFlood")]
    stats = IngestStats()
    matrix, sidecar = featurize(records, Scheme.THREE_RANGE, device_id="dev", stats=stats)
    assert matrix.shape == (4, 27)
    iat = np.expm1(matrix[:, 1])
    np.testing.assert_allclose(iat, [0.0, 0.5, 0.0, 1.0], atol=1e-12)
    assert stats.out_of_order == 1
    assert sidecar["label"].tolist() == ["unlabeled", "unlabeled", "unlabeled", "attack"]
    assert sidecar["attack_kind"].tolist()[-1] == "SynFlood"
    assert set(sidecar["device_id"]) == {"dev"}


def test_feature_matrix_file_detects_scheme(tmp_path):
    records = [_record(ts=float(i), label=Label.NORMAL) for i in range(5)]
    matrix, sidecar = featurize(records, Scheme.HIERARCHICAL, device_id="d0")
    path = tmp_path / "features" / "train.csv"
    write_feature_matrix(path, matrix, sidecar, Scheme.HIERARCHICAL)
    loaded, loaded_sidecar, scheme = read_feature_matrix(path)
    assert scheme is Scheme.HIERARCHICAL
    np.testing.assert_array_equal(loaded, matrix)
    assert loaded_sidecar["label"].tolist() == ["normal"] * 5
    assert loaded_sidecar["attack_kind"].tolist() == [""] * 5


def test_feature_matrix_without_sidecar_is_unlabeled(tmp_path):
    matrix, sidecar = featurize([_record(ts=0.0), _record(ts=1.0)], Scheme.THREE_RANGE)
    path = tmp_path / "m.csv"
    write_feature_matrix(path, matrix, sidecar, Scheme.THREE_RANGE)
    (tmp_path / "m.labels.csv").unlink()
    _, loaded_sidecar, _ = read_feature_matrix(path)
    assert loaded_sidecar["label"].tolist() == ["unlabeled", "unlabeled"]


def test_empty_stream_gives_empty_matrix():
    matrix, sidecar = featurize([], Scheme.HIERARCHICAL)
    assert matrix.shape == (0, 69)
    assert len(sidecar) == 0
