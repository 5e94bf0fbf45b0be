from enum import IntEnum
from typing import FrozenSet, List, Tuple


class ThreeRange(IntEnum):
    """IANA 端口三段划分。数值即 one-hot 中的列序号。"""
    SYSTEM = 0
    USER = 1
    DYNAMIC = 2

    def __str__(self):
        return {
            ThreeRange.SYSTEM: "System",
            ThreeRange.USER: "User",
            ThreeRange.DYNAMIC: "Dynamic",
        }[self]

    @classmethod
    def from_port(cls, port: int) -> "ThreeRange":
        if port <= 1023:
            return cls.SYSTEM
        if port <= 49151:
            return cls.USER
        return cls.DYNAMIC


def _ports(*items) -> FrozenSet[int]:
    """把 (端口 | (起, 止)) 展开成集合，区间两端都包含"""
    out = set()
    for item in items:
        if isinstance(item, tuple):
            out.update(range(item[0], item[1] + 1))
        else:
            out.add(item)
    return frozenset(out)


# 顺序即优先级：自上而下第一个命中的分箱生效
PORT_HIERARCHY: List[Tuple[str, FrozenSet[int]]] = [
    ("mqttPorts", _ports(1883, 8883)),
    ("coapPorts", _ports(5683, 5684)),
    ("rtspPorts", _ports(8554, 8322, (8000, 8003), 1935, 8888)),
    ("httpPorts", _ports(80, 280, 443, 591, 593, 777, 488, 1183, 1184, 2069, 2301, 2381, 8008, 8080)),
    ("mailPorts", _ports(24, 25, 50, 58, 61, 109, 110, 143, 158, 174, 209, 220, 406, 512, 585, 993, 995)),
    ("dnsPorts", _ports(42, 53, 81, 101, 105, 261)),
    ("ftpPorts", _ports(20, 21, 47, 69, 115, 152, 189, 349, 574, 662, 989, 990)),
    ("shellPorts", _ports(22, 23, 59, 87, 89, 107, 211, 221, 222, 513, 614, 759, 992)),
    ("remoteExecPorts", _ports(512, 514)),
    ("authPorts", _ports(13, 56, 113, 316, 353, 370, 749, 750)),
    ("passwordPorts", _ports(229, 464, 586, 774)),
    ("newsPorts", _ports(114, 119, 532, 563)),
    ("chatPorts", _ports(194, 258, 531, 994)),
    ("printPorts", _ports(35, 92, 170, 515, 631)),
    ("timePorts", _ports(13, 37, 52, 123, 519, 525)),
    ("dbmsPorts", _ports(65, 66, 118, 150, 156, 217)),
    ("dhcpPorts", _ports(546, 547, 647, 847)),
    ("whoisPorts", _ports(43, 63)),
    ("netbiosPorts", _ports((137, 139))),
    ("kerberosPorts", _ports(88, 748, 750)),
    ("RPCPorts", _ports(111, 121, 369, 530, 567, 593, 602)),
    ("snmpPorts", _ports(161, 162, 391)),
    ("privilegedPorts", _ports((0, 1023))),
    ("nonprivilegedPorts", _ports((1024, 65535))),
]

HIERARCHY_BINS: List[str] = [name for name, _ in PORT_HIERARCHY]
THREE_RANGE_BINS: List[str] = [str(r) for r in ThreeRange]

# 预先展开成 65536 项的查找表，分类变成 O(1)
_HIERARCHY_LOOKUP: List[int] = [-1] * 65536
for _index, (_name, _members) in reversed(list(enumerate(PORT_HIERARCHY))):
    for _port in _members:
        _HIERARCHY_LOOKUP[_port] = _index


def hierarchy_index(port: int) -> int:
    if not 0 <= port <= 65535:
        raise ValueError(f"端口号超出范围: {port}")
    return _HIERARCHY_LOOKUP[port]
