import random

import pytest

from lowpan import DatagramKind, MeshHeader, build_datagram, fragment
from models import NodeRole, NodeSpec, Scenario
from sim.kernel import Scheduler


def make_scenario(nodes, **sections) -> Scenario:
    """nodes: lista de (id, x, y, rol[, destino])."""
    specs = []
    for item in nodes:
        node_id, x, y, role = item[:4]
        dst = item[4] if len(item) > 4 else None
        specs.append(NodeSpec(id=node_id, x_m=x, y_m=y, role=NodeRole(role), destination=dst))
    return Scenario(name="prueba", nodes=specs, **sections)


@pytest.fixture
def scheduler():
    return Scheduler()


@pytest.fixture
def rng():
    return random.Random(7)


@pytest.fixture
def line_scenario():
    """Border router y tres nodos en línea, 40 m entre vecinos."""
    def build(sender_dst=None, **sections):
        sections.setdefault("run", {"duration_s": 600, "warmup_s": 300, "replicas": 1, "base_seed": 3})
        sections.setdefault("sdn", {"update_period_s": 1200, "path_metric": "hop"})
        last = (4, 120, 0, "sender", sender_dst) if sender_dst is not False else (4, 120, 0, "forwarder")
        return make_scenario([
            (1, 0, 0, "border_router"),
            (2, 40, 0, "forwarder"),
            (3, 80, 0, "forwarder"),
            last,
        ], **sections)
    return build


def mesh_frame(orig, final, size=30, hops=14, mac_src=1, mac_dst=2, tag=1):
    d = build_datagram(orig, final, DatagramKind.UDP_DATA, payload=b"\x01\x02", payload_len=size)
    return fragment(d, MeshHeader(hops, orig, final), tag=tag, mac_src=mac_src, mac_dst=mac_dst)[0]
