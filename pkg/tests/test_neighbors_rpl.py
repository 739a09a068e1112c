from pathlib import Path

import pytest

from codec import ETX_SCALE
from experiment import ExperimentOverrides, apply_overrides
from models import RplParams, StackMode
from neighbors import ETX_CAP, NeighborTable, ewma_etx
from rpl import INFINITE_RANK, ROOT_RANK, DaoContent, DioContent, Rpl, RoutingTable
from scenario import load_scenario
from sim.kernel import seconds
from sim.replica import Replica

REFERENCE = Path(__file__).resolve().parent.parent / "scenarios" / "reference26.env"


# --- Vecinos ---
@pytest.mark.parametrize("attempts,expected", [(1, 128), (2, 141), (4, 167)])
def test_ewma_etx(attempts, expected):
    assert ewma_etx(ETX_SCALE, attempts) == expected


def test_ewma_is_bounded():
    value = ETX_SCALE
    for _ in range(200):
        value = ewma_etx(value, 40)
    assert value == ETX_CAP
    assert ewma_etx(ETX_SCALE, 0) == ETX_SCALE


def test_overhear_inserts_then_refreshes():
    table = NeighborTable()
    record, new = table.overhear(5, -60, now=10)
    assert new and record.etx_x128 == ETX_SCALE
    record, new = table.overhear(5, -70, now=20)
    assert not new
    assert record.rssi_dbm == -70 and record.last_heard == 20
    assert len(table) == 1 and 5 in table


def test_failure_counts_as_all_retries():
    table = NeighborTable(max_retries=3)
    table.overhear(5, -60, 0)
    assert table.etx_update(5, None) == ewma_etx(ETX_SCALE, 4)
    assert table.etx_update(9, 1) is None
    assert table.etx(9) == ETX_SCALE


def test_purge_and_snapshot_order():
    table = NeighborTable()
    table.overhear(7, -200, 0)
    table.overhear(3, -50, 100)
    assert table.purge(now=150, max_age_us=100) == [7]
    table.overhear(2, -55, 150)
    assert [n.addr for n in table.snapshot()] == [2, 3]
    table.overhear(9, -300, 150)
    assert table.snapshot()[-1].rssi_dbm == -128


# --- RPL ---
def _rpl(scheduler, rng, addr, root=1, sent=None, daos=None, rejected=None, **params):
    neighbors = NeighborTable()
    return Rpl(
        addr, root, scheduler, rng, RplParams(**params), neighbors,
        send_dio=(sent.append if sent is not None else lambda dio: None),
        send_dao=(lambda parent, dao: daos.append((parent, dao))) if daos is not None else None,
        on_route_rejected=rejected.append if rejected is not None else None,
    )


def test_root_trickle_first_intervals(scheduler, rng):
    sent = []
    times = []
    root = _rpl(scheduler, rng, 1, sent=sent)
    root.send_dio = lambda dio: times.append(scheduler.now)
    root.start()
    assert root.rank == ROOT_RANK
    scheduler.run(seconds(12))
    assert seconds(2) <= times[0] < seconds(4)
    assert seconds(8) <= times[1] < seconds(12)


def test_trickle_interval_caps_at_max(scheduler, rng):
    root = _rpl(scheduler, rng, 1, i_min_s=1, doublings=2)
    root.start()
    scheduler.run(seconds(60))
    assert root.state.trickle.interval_us == seconds(4)
    assert root.dio_sent >= 14


def test_join_and_switch_with_hysteresis(scheduler, rng):
    node = _rpl(scheduler, rng, 9)
    node.on_dio(DioContent(sender=5, rank=512, root=1))
    assert node.parent == 5 and node.rank == 640
    node.on_dio(DioContent(sender=6, rank=400, root=1))
    assert node.parent == 5
    node.on_dio(DioContent(sender=1, rank=ROOT_RANK, root=1))
    assert node.parent == 1 and node.rank == ROOT_RANK + ETX_SCALE


def test_rank_follows_parent_dio(scheduler, rng):
    node = _rpl(scheduler, rng, 9)
    node.on_dio(DioContent(sender=5, rank=512, root=1))
    node.on_dio(DioContent(sender=5, rank=768, root=1))
    assert node.rank == 768 + ETX_SCALE


def test_ignores_children_and_detached_senders(scheduler, rng):
    node = _rpl(scheduler, rng, 9)
    node.on_dio(DioContent(sender=4, rank=INFINITE_RANK, root=1))
    node.on_dio(DioContent(sender=4, rank=384, root=1, parent=9))
    assert node.parent is None and not node.state.joined


def test_parent_change_callback(scheduler, rng):
    changes = []
    node = _rpl(scheduler, rng, 9)
    node.on_parent_change = lambda old, new: changes.append((old, new))
    node.on_dio(DioContent(sender=5, rank=512, root=1))
    node.on_dio(DioContent(sender=1, rank=ROOT_RANK, root=1))
    assert changes == [(None, 5), (5, 1)]


def test_dao_on_join_and_periodic(scheduler, rng):
    daos = []
    node = _rpl(scheduler, rng, 9, daos=daos, dao_period_s=60)
    node.on_dio(DioContent(sender=5, rank=512, root=1))
    assert daos == [(5, DaoContent(9, 9))]
    scheduler.run(seconds(125))
    assert len(daos) == 3


def test_dao_storing_forwards_upward(scheduler, rng):
    daos = []
    node = _rpl(scheduler, rng, 5, daos=daos)
    node.on_dio(DioContent(sender=1, rank=ROOT_RANK, root=1))
    daos.clear()
    node.on_dao(DaoContent(sender=9, target=12), child=9)
    assert node.next_hop(12) == 9
    assert node.next_hop(77) == 1
    assert daos == [(1, DaoContent(5, 12))]


def test_parent_change_sends_no_path_to_old_parent(scheduler, rng):
    daos = []
    node = _rpl(scheduler, rng, 9, daos=daos)
    node.on_dio(DioContent(sender=5, rank=512, root=1))
    daos.clear()
    node.on_dio(DioContent(sender=1, rank=ROOT_RANK, root=1))
    assert daos == [(5, DaoContent(9, 9, no_path=True)), (1, DaoContent(9, 9))]


def test_no_path_drops_routes_through_the_child(scheduler, rng):
    daos = []
    node = _rpl(scheduler, rng, 5, daos=daos)
    node.on_dio(DioContent(sender=1, rank=ROOT_RANK, root=1))
    node.on_dao(DaoContent(sender=9, target=9), child=9)
    node.on_dao(DaoContent(sender=9, target=12), child=9)
    node.on_dao(DaoContent(sender=8, target=8), child=8)
    daos.clear()
    node.on_dao(DaoContent(sender=9, target=9, no_path=True), child=9)
    assert node.routes.items(scheduler.now) == {8: 8}
    assert daos == []


def test_rank_increase_does_not_adopt_a_descendant(scheduler, rng):
    node = _rpl(scheduler, rng, 5)
    node.on_dio(DioContent(sender=2, rank=384, root=1))
    assert node.rank == 512
    node.on_dio(DioContent(sender=2, rank=1000, root=1))
    assert node.rank == 1000 + ETX_SCALE
    # 7 cuelga de 6, que cuelga de 5: su rango viene del 512 anterior
    node.on_dio(DioContent(sender=7, rank=768, root=1, parent=6))
    assert node.parent == 2
    node.on_dio(DioContent(sender=3, rank=ROOT_RANK, root=1))
    assert node.parent == 3 and node.rank == ROOT_RANK + ETX_SCALE


def test_routing_table_capacity_rejects(scheduler, rng):
    rejected = []
    daos = []
    node = _rpl(scheduler, rng, 5, daos=daos, rejected=rejected, routing_capacity=2)
    for target in (10, 11, 12):
        node.on_dao(DaoContent(sender=target, target=target), child=target)
    assert rejected == [12]
    assert node.routes.rejected == 1
    assert len(node.routes) == 2


def test_routes_expire():
    routes = RoutingTable(capacity=2)
    routes.add(10, 3, expires_at=100, now=0)
    assert routes.lookup(10, 50) == 3
    assert routes.lookup(10, 100) is None
    assert routes.add(11, 3, 300, now=150)
    assert routes.add(12, 3, 300, now=150)
    assert routes.items(150) == {11: 3, 12: 3}


# --- DODAG en una red completa ---
def _grid_replica(mode, **overrides):
    scenario = apply_overrides(load_scenario(REFERENCE), ExperimentOverrides(duration_s=1200, **overrides))
    replica = Replica(scenario, mode)
    replica.run()
    return replica


@pytest.mark.parametrize("mode", [StackMode.SDN, StackMode.RPL])
def test_parent_pointers_form_a_tree_on_a_lossy_grid(mode):
    replica = _grid_replica(mode, lossy=True)
    root = replica.gateway.addr
    for addr, node in replica.nodes.items():
        seen = [addr]
        current = node
        while current.addr != root:
            parent = current.rpl.parent
            assert parent is not None, f"{current.addr} sin padre"
            assert parent not in seen, f"ciclo {seen + [parent]}"
            seen.append(parent)
            current = replica.nodes[parent]


def test_stored_routes_point_to_current_children():
    replica = _grid_replica(StackMode.RPL)
    now = replica.scheduler.now
    stored = 0
    for addr, node in replica.nodes.items():
        for target, next_hop in node.rpl.routes.items(now).items():
            assert replica.nodes[next_hop].rpl.parent == addr, (addr, target, next_hop)
            stored += 1
    assert stored >= len(replica.nodes) - 1
