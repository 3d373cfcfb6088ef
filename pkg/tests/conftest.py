import ipaddress

import pytest

from microseg.flows import FlowRecord, MemberScope


@pytest.fixture
def scope_10_24() -> MemberScope:
    """Members in 10.0.0.0/24 plus a catch-all internet object."""
    return MemberScope(
        member_cidrs=(ipaddress.IPv4Network("10.0.0.0/24"),),
        object_table=((ipaddress.IPv4Network("0.0.0.0/0"), "internet"),),
    )


def flow(
    src: str,
    dst: str,
    protocol: str = "TCP",
    dst_port: int = 443,
    timestamp: int = 0,
    packets: int = 1,
    nbytes: int = 100,
) -> FlowRecord:
    return FlowRecord(
        timestamp=timestamp,
        src_addr=src,
        dst_addr=dst,
        protocol=protocol,
        dst_port=dst_port,
        packet_count=packets,
        byte_count=nbytes,
    )
