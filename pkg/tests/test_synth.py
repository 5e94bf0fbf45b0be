import pandas as pd
import pytest

from clusterfl.core.ports import HIERARCHY_BINS, ThreeRange, hierarchy_index
from clusterfl.core.utils import make_rng
from clusterfl.exceptions import ConfigError
from clusterfl.ingest import read_records
from clusterfl.models import AttackEpisode, AttackKind, AttackRole, FleetSpec, IpProto, Label
from clusterfl.synth import (
    CNC_PORT,
    DEFAULT_ARCHETYPES,
    SCAN_PORTS,
    inject_attacks,
    make_fleet,
    make_instance,
    normal_trace,
    resolve_archetypes,
)


@pytest.fixture
def meter():
    rng = make_rng(0)
    device = make_instance(DEFAULT_ARCHETYPES["coap_meter"], "coap_meter_00", 0, 1, rng)
    return device, normal_trace(device, 200, rng)


def test_normal_trace_is_sorted_and_sized(meter):
    device, trace = meter
    assert len(trace) == 200
    timestamps = [r.timestamp for r in trace]
    assert timestamps == sorted(timestamps)
    assert all(r.ip_proto is IpProto.UDP for r in trace)
    assert {r.dst_port for r in trace if r.src_ip == device.ip} == {5683}


def test_inject_attacks_labels_and_orders(meter):
    device, trace = meter
    episodes = [AttackEpisode(kind=AttackKind.UDP_FLOOD, start=10.0, end=20.0, rate=100.0, max_packets=50)]
    merged, counts = inject_attacks(trace, episodes, seed=3, device=device)
    assert counts == {"normal": 200, "attack": 50, "attack/UdpFlood": 50}
    assert len(merged) == 250
    assert [r.timestamp for r in merged] == sorted(r.timestamp for r in merged)
    attacks = [r for r in merged if r.label is Label.ATTACK]
    assert all(r.attack_kind == "UdpFlood" for r in attacks)
    assert all(r.frame_len == 554 and r.ip_ttl == 64 and r.ip_tos == 0 for r in attacks)
    origin = trace[0].timestamp
    assert all(origin + 10.0 <= r.timestamp < origin + 20.0 for r in attacks)
    assert all(r.label is Label.NORMAL and r.attack_kind is None for r in merged if r.label is not Label.ATTACK)


def test_inject_attacks_is_seeded(meter):
    device, trace = meter
    episodes = [AttackEpisode(kind=AttackKind.SYN_FLOOD, start=0.0, end=50.0, rate=5.0)]
    first, _ = inject_attacks(trace, episodes, seed=11, device=device)
    second, _ = inject_attacks(trace, episodes, seed=11, device=device)
    assert first == second


def test_episode_outside_trace_is_skipped(meter):
    device, trace = meter
    episodes = [AttackEpisode(kind=AttackKind.ICMP_FLOOD, start=1e6, end=2e6, rate=10.0)]
    merged, counts = inject_attacks(trace, episodes, seed=0, device=device)
    assert counts["attack"] == 0
    assert len(merged) == len(trace)


def test_port_sweep_and_target_role(meter):
    device, trace = meter
    sweep = AttackEpisode(kind=AttackKind.PORT_SWEEP, start=0.0, end=100.0, rate=20.0, max_packets=120)
    merged, _ = inject_attacks(trace, [sweep], seed=1, device=device)
    scanned = [r for r in merged if r.label is Label.ATTACK]
    assert len(scanned) == 120
    assert all(r.dst_port in SCAN_PORTS and r.tcp_flags == ("S",) for r in scanned)
    assert all(r.src_ip == device.ip for r in scanned)

    flood = AttackEpisode(kind=AttackKind.ACK_FLOOD, start=0.0, end=100.0, rate=5.0, role=AttackRole.TARGET,
                          max_packets=20)
    merged, _ = inject_attacks(trace, [flood], seed=1, device=device)
    inbound = [r for r in merged if r.label is Label.ATTACK]
    assert inbound and all(r.dst_ip == device.ip and r.dst_port == 5683 for r in inbound)


def test_cnc_heartbeat_talks_to_fixed_port(meter):
    device, trace = meter
    cnc = AttackEpisode(kind=AttackKind.CNC_HEARTBEAT, start=0.0, end=400.0, rate=0.1, max_packets=5)
    merged, counts = inject_attacks(trace, [cnc], seed=2, device=device)
    beats = [r for r in merged if r.label is Label.ATTACK]
    assert counts["attack"] == len(beats)
    assert len(beats) % 2 == 0
    outbound = [r for r in beats if r.src_ip == device.ip]
    assert outbound and all(r.dst_port == CNC_PORT and r.tcp_flags == ("P", "A") for r in outbound)


def test_cnc_port_is_unusual_for_every_archetype():
    assert ThreeRange.from_port(CNC_PORT) is not ThreeRange.SYSTEM
    assert all(CNC_PORT not in a.dst_ports for a in DEFAULT_ARCHETYPES.values())
    assert HIERARCHY_BINS[hierarchy_index(CNC_PORT)] == "nonprivilegedPorts"


def test_unknown_archetype_is_config_error():
    with pytest.raises(ConfigError):
        resolve_archetypes(FleetSpec(archetype_names=["mqtt_telemetry", "toaster"]))


def test_make_fleet_writes_cohort(tiny_fleet, tiny_fleet_spec, tmp_path):
    devices = tiny_fleet.cohort.devices
    assert len(devices) == 9
    assert [d.archetype for d in devices[:3]] == ["mqtt_telemetry"] * 3
    entry = devices[0]
    assert len(list(read_records(entry.train))) == tiny_fleet_spec.train_packets
    assert len(list(read_records(entry.validation_normal))) == tiny_fleet_spec.validation_packets
    attack = list(read_records(entry.validation_attack[0]))
    assert {r.label for r in attack} == {Label.NORMAL, Label.ATTACK}

    root = tmp_path / "fleet"
    labels = pd.read_csv(root / "fleet_labels.csv")
    assert list(labels.columns) == ["device_id", "archetype"]
    assert labels["device_id"].tolist() == [d.device_id for d in devices]
    assert (root / "episodes.json").is_file()
    assert tiny_fleet.episodes[entry.device_id]["label_counts"]["attack"] > 0


def test_make_fleet_is_deterministic(tiny_fleet_spec, tmp_path):
    first = make_fleet(tiny_fleet_spec, 5, tmp_path / "a")
    second = make_fleet(tiny_fleet_spec, 5, tmp_path / "b")
    other = make_fleet(tiny_fleet_spec, 6, tmp_path / "c")
    for a, b in zip(first.cohort.devices, second.cohort.devices):
        assert a.train.read_bytes() == b.train.read_bytes()
        assert a.validation_attack[0].read_bytes() == b.validation_attack[0].read_bytes()
    assert first.cohort.devices[0].train.read_bytes() != other.cohort.devices[0].train.read_bytes()
