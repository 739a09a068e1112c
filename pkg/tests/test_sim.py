import itertools
import random

import pytest
import simpy

from conftest import make_scenario
from flow_table import PRIORITY_CONTROLLER, forwarding_entry
from lowpan import HOPS_LEFT_INIT, MESH_HEADER_SIZE, DatagramKind, Frame, MeshHeader, build_datagram, fragment, on_air_bytes
from models import CostModel, MacParams, StackMode, TrafficParams, UdgmParams, Window
from sim.channel import ExternalLink, Outcome, UdgmChannel
from sim.costs import hop_cost
from sim.kernel import Scheduler, seconds
from sim.mac import CsmaMac
from sim.metrics import Metrics
from sim.replica import ConfigError, Replica, run_replica
from sim.traffic import EchoApp

LINE = {1: (0, 0), 2: (40, 0), 3: (80, 0), 4: (130, 0)}


# --- Kernel ---
def test_same_instant_events_run_in_schedule_order(scheduler):
    order = []
    for i in range(5):
        scheduler.schedule(100, lambda i=i: order.append(i))
    timer = scheduler.schedule(100, lambda: order.append("x"))
    timer.cancel()
    scheduler.run(1000)
    assert order == [0, 1, 2, 3, 4]


def test_schedule_rejects_negative_delay(scheduler):
    with pytest.raises(ValueError):
        scheduler.schedule(-1, lambda: None)


# --- Costos y pipeline ---
ZERO_COSTS = CostModel(t_proc_mesh_us=0, t_proc_routeover_base_us=0, t_proc_routeover_per_frag_us=0, t_ext_link_ms=0)


def _pipeline_oracle(mode, hops, fragments, airtime_us, costs=ZERO_COSTS):
    """
    Cota inferior ideal: cada enlace es un proceso simpy que toma tramas de la
    bandeja del emisor y las deposita en la del siguiente. Route-over espera
    el datagrama completo en cada salto.
    """
    env = simpy.Environment()
    inboxes = [simpy.Store(env) for _ in range(hops + 1)]
    arrivals = []

    def mesh_link(h):
        while True:
            frame = yield inboxes[h].get()
            if h > 0:
                yield env.timeout(hop_cost(mode, fragments, costs))
            yield env.timeout(airtime_us)
            yield inboxes[h + 1].put(frame)

    def routeover_link(h):
        while True:
            batch = []
            for _ in range(fragments):
                batch.append((yield inboxes[h].get()))
            if h > 0:
                yield env.timeout(hop_cost(mode, fragments, costs))
            for frame in batch:
                yield env.timeout(airtime_us)
                yield inboxes[h + 1].put(frame)

    def sink():
        for _ in range(fragments):
            yield inboxes[hops].get()
            arrivals.append(env.now)

    link = mesh_link if mode is StackMode.SDN else routeover_link
    for h in range(hops):
        env.process(link(h))
    done = env.process(sink())
    for i in range(fragments):
        inboxes[0].put(i)
    env.run(until=done)
    return int(arrivals[-1])


def test_hop_cost_by_mode():
    costs = CostModel()
    assert hop_cost(StackMode.SDN, 3, costs) == 500
    assert hop_cost(StackMode.RPL, 3, costs) == 2000 + 3 * 1000


@pytest.mark.parametrize("hops,frags", list(itertools.product(range(1, 7), repeat=2)))
def test_pipeline_oracle_ideal(hops, frags):
    t = 4064
    assert _pipeline_oracle(StackMode.SDN, hops, frags, t) == (hops + frags - 1) * t
    assert _pipeline_oracle(StackMode.RPL, hops, frags, t) == hops * frags * t


def test_cost_model_calibration():
    with pytest.raises(ValueError):
        CostModel(t_proc_mesh_us=5000, t_proc_routeover_base_us=1000, t_proc_routeover_per_frag_us=1000)


def _chain(mode, hops, costs):
    """
    Cadena 1 <- 2 <- ... <- hops+1 con el reenvío hacia el nodo 1 ya resuelto.
    El disco de interferencia cubre toda la cadena: no hay terminales ocultos.
    """
    nodes = [(1, 0, 0, "border_router")] + [(i, 40 * (i - 1), 0, "forwarder") for i in range(2, hops + 2)]
    scenario = make_scenario(nodes, costs=costs.model_dump(), channel={"interference_range_m": 200})
    replica = Replica(scenario, mode)
    for addr in range(2, hops + 2):
        node = replica.nodes[addr]
        if mode is StackMode.SDN:
            node.install_entries([forwarding_entry(PRIORITY_CONTROLLER, addr - 1, 600, final=1)])
        else:
            node.rpl.state.preferred_parent = addr - 1
    return replica


def _send_through_chain(mode, hops, total, costs, seed=5):
    """Devuelve (instante de entrega en el nodo 1, tramas del datagrama en el origen)."""
    replica = _chain(mode, hops, costs)
    origin = hops + 1
    done = []
    replica.nodes[1].app = lambda d: done.append(replica.scheduler.now)
    replica.rng.seed(seed)

    d = build_datagram(origin, 1, DatagramKind.UDP_DATA, payload_len=total - 10)
    mesh = MeshHeader(HOPS_LEFT_INIT, origin, 1) if mode is StackMode.SDN else None
    frames = fragment(d, mesh, tag=1)
    replica.nodes[origin].send_datagram(d)
    replica.scheduler.run(seconds(5))
    assert len(done) == 1
    return done[0], frames


@pytest.mark.parametrize("hops,frags", list(itertools.product(range(1, 5), repeat=2)))
def test_real_chain_respects_pipeline_bounds(hops, frags):
    total = 60 if frags == 1 else 100 * frags
    costs = CostModel()
    for mode in (StackMode.SDN, StackMode.RPL):
        completion, frames = _send_through_chain(mode, hops, total, costs)
        assert len(frames) == frags
        t_min = min(on_air_bytes(f) for f in frames) * 8 * 1_000_000 // costs.bitrate_bps
        oracle_costs = ZERO_COSTS if mode is StackMode.SDN else costs
        assert completion >= _pipeline_oracle(mode, hops, frags, t_min, oracle_costs)


@pytest.mark.parametrize("hops", range(1, 6))
def test_real_chain_single_frame_differs_by_hop_cost(hops):
    # Con t_proc_mesh >= turnaround + ACK ningún CCA encuentra el medio ocupado y
    # ambos modos consumen los mismos sorteos de backoff
    costs = CostModel(t_proc_mesh_us=1000, t_proc_routeover_base_us=2000, t_proc_routeover_per_frag_us=1000)
    sdn, _ = _send_through_chain(StackMode.SDN, hops, 60, costs)
    rpl, _ = _send_through_chain(StackMode.RPL, hops, 60, costs)
    mesh_airtime = MESH_HEADER_SIZE * 8 * 1_000_000 // costs.bitrate_bps
    expected = (hops - 1) * (hop_cost(StackMode.RPL, 1, costs) - hop_cost(StackMode.SDN, 1, costs)) - hops * mesh_airtime
    assert rpl - sdn == expected


# --- Canal UDGM ---
class Recorder:
    def __init__(self):
        self.received = []
        self.ended = []

    def on_receive(self, tx, rssi_dbm):
        self.received.append((tx.sender, rssi_dbm))

    def on_signal_end(self, tx):
        self.ended.append(tx.sender)


def _channel(scheduler, **params):
    ch = UdgmChannel(scheduler, LINE, UdgmParams(**params), random.Random(2))
    radios = {n: Recorder() for n in LINE}
    for n, r in radios.items():
        ch.attach(n, r)
    return ch, radios


def test_airtime():
    ch = UdgmChannel(Scheduler(), LINE, UdgmParams(), random.Random(1))
    assert ch.airtime_us(127) == 4064


def test_reception_and_interference_disks(scheduler):
    ch, radios = _channel(scheduler)
    tx = ch.transmit(1, "trama", 50)
    scheduler.run(seconds(1))
    assert tx.outcomes == {2: Outcome.DELIVERED}
    assert radios[2].received == [(1, ch.rssi[(1, 2)])]
    assert radios[3].ended == [1]
    assert radios[4].received == [] and radios[4].ended == []


def test_overlapping_signals_collide(scheduler):
    ch, radios = _channel(scheduler)
    a = ch.transmit(1, "a", 50)
    b = ch.transmit(3, "b", 50)
    scheduler.run(seconds(1))
    assert a.outcomes[2] is Outcome.COLLIDED
    assert b.outcomes[2] is Outcome.COLLIDED
    assert radios[2].received == []


def test_half_duplex_sender_cannot_transmit_twice(scheduler):
    ch, _ = _channel(scheduler)
    ch.transmit(1, "a", 50)
    with pytest.raises(RuntimeError):
        ch.transmit(1, "b", 50)


def test_lossy_channel_drops_with_probability(scheduler):
    ch, radios = _channel(scheduler, p_tx_success=0.5, p_rx_success=1.0)
    for i in range(400):
        scheduler.schedule(i * 10_000, lambda: ch.transmit(1, "x", 20))
    scheduler.run(seconds(10))
    assert 150 < len(radios[2].received) < 250


def test_every_link_accounts_for_each_transmission(scheduler):
    ch, radios = _channel(scheduler, p_tx_success=0.8, p_rx_success=0.9)
    sent = {n: [] for n in LINE}
    for i in range(300):
        for n in LINE:
            at = i * 6_000 + n * 700
            scheduler.schedule(at, lambda n=n: sent[n].append(ch.transmit(n, "x", 50)))
    scheduler.run(seconds(5))

    collided = 0
    for a in LINE:
        assert len(sent[a]) == 300
        for b in ch.in_range[a]:
            received = sum(1 for sender, _ in radios[b].received if sender == a)
            lost = sum(1 for tx in sent[a] if tx.outcomes[b] is not Outcome.DELIVERED)
            collided += sum(1 for tx in sent[a] if tx.outcomes[b] is Outcome.COLLIDED)
            assert received + lost == len(sent[a])
    assert collided > 0


def test_external_link_is_fifo(scheduler):
    link = ExternalLink(scheduler, 5000)
    got = []
    link.send(got.append, "a")
    link.send(got.append, "b")
    scheduler.run(4999)
    assert got == []
    scheduler.run(5001)
    assert got == ["a", "b"]
    assert link.messages == 2


# --- MAC ---
def _macs(scheduler, hook=None):
    ch = UdgmChannel(scheduler, {1: (0, 0), 2: (40, 0)}, UdgmParams(), random.Random(3))
    ch.loss_hook = hook
    inbox = {1: [], 2: []}
    links = []
    macs = {
        n: CsmaMac(n, scheduler, ch, MacParams(), random.Random(n),
                   on_frame=lambda f, rssi, n=n: inbox[n].append(f),
                   on_link_result=lambda dst, attempts: links.append((dst, attempts)))
        for n in (1, 2)
    }
    return macs, inbox, links


def _data(dst=2):
    return Frame(mac_src=1, mac_dst=dst, payload_len=40)


def test_mac_delivers_on_first_attempt(scheduler):
    macs, inbox, links = _macs(scheduler)
    results = []
    macs[1].send(_data(), lambda ok, n: results.append((ok, n)))
    scheduler.run(seconds(1))
    assert results == [(True, 1)]
    assert len(inbox[2]) == 1
    assert links == [(2, 1)]


def test_mac_retries_after_lost_frame(scheduler):
    lost = []

    def hook(frame, receiver):
        if isinstance(frame, Frame) and not lost:
            lost.append(frame)
            return True
        return False

    macs, inbox, _ = _macs(scheduler, hook)
    results = []
    macs[1].send(_data(), lambda ok, n: results.append((ok, n)))
    scheduler.run(seconds(1))
    assert results == [(True, 2)]
    assert len(inbox[2]) == 1


def test_mac_suppresses_duplicate_after_lost_ack(scheduler):
    lost = []

    def hook(frame, receiver):
        if not isinstance(frame, Frame) and not lost:
            lost.append(frame)
            return True
        return False

    macs, inbox, _ = _macs(scheduler, hook)
    results = []
    macs[1].send(_data(), lambda ok, n: results.append((ok, n)))
    scheduler.run(seconds(1))
    assert results == [(True, 2)]
    assert len(inbox[2]) == 1


def test_mac_gives_up_after_retries(scheduler):
    macs, inbox, links = _macs(scheduler, lambda frame, receiver: isinstance(frame, Frame))
    results = []
    macs[1].send(_data(), lambda ok, n: results.append((ok, n)))
    scheduler.run(seconds(1))
    assert results == [(False, 4)]
    assert links == [(2, None)]


def test_mac_broadcast_has_single_attempt(scheduler):
    macs, inbox, links = _macs(scheduler)
    results = []
    macs[1].send(_data(dst=0xFFFF), lambda ok, n: results.append((ok, n)))
    scheduler.run(seconds(1))
    assert results == [(True, 1)]
    assert len(inbox[2]) == 1
    assert links == []


def test_mac_queue_is_fifo(scheduler):
    macs, inbox, _ = _macs(scheduler)
    for size in (10, 20, 30):
        macs[1].send(Frame(mac_src=1, mac_dst=2, payload_len=size))
    scheduler.run(seconds(1))
    assert [f.payload_len for f in inbox[2]] == [10, 20, 30]
    assert macs[1].idle


# --- Tráfico ---
class _StubNode:
    addr = 5

    def __init__(self):
        self.sent = []
        self.app = None

    def send_datagram(self, d):
        self.sent.append(d)


def test_echo_period_distribution(scheduler):
    app = EchoApp(_StubNode(), scheduler, random.Random(9), TrafficParams(), Metrics(0, 0, StackMode.SDN, 0))
    draws = [app.draw_period() for _ in range(10_000)]
    assert min(draws) >= 30 and max(draws) <= 90
    assert abs(sum(draws) / len(draws) - 60) < 1


def test_echo_app_sends_fixed_payload(scheduler):
    node = _StubNode()
    metrics = Metrics(0, 0, StackMode.SDN, 0)
    app = EchoApp(node, scheduler, random.Random(9), TrafficParams(), metrics, destination=7)
    app.start()
    scheduler.run(seconds(200))
    assert len(node.sent) >= 2
    assert all(d.app_payload_len == 40 and d.total == 50 for d in node.sent)
    assert metrics.echo_sent == len(node.sent)


# --- Réplicas completas ---
def _pair(**sections):
    sections.setdefault("run", {"duration_s": 600, "warmup_s": 300, "replicas": 1, "base_seed": 4})
    return make_scenario([(1, 0, 0, "border_router"), (2, 40, 0, "sender")], **sections)


def test_replica_requires_a_border_router():
    scenario = _pair()
    scenario.nodes[0].role = scenario.nodes[1].role
    with pytest.raises(ConfigError):
        Replica(scenario, StackMode.SDN)


def test_sdn_pair_echoes_without_dao():
    m = run_replica(_pair(), StackMode.SDN)
    assert m.dao_datagrams == 0
    assert m.steady_rtt()
    assert all(s.path_fwd == (2, 1) for s in m.steady_rtt())
    assert m.table_miss_requests[Window.STEADY] == 0


def test_rpl_pair_echoes_with_dao():
    m = run_replica(_pair(), StackMode.RPL)
    assert m.dao_datagrams > 0
    assert m.steady_rtt()


def test_lossless_links_keep_unit_etx():
    replica = Replica(_pair(), StackMode.SDN)
    replica.run()
    for node in replica.nodes.values():
        assert all(n.etx_x128 == 128 for n in node.neighbors.snapshot())


def test_every_transmitted_byte_is_classified():
    m = run_replica(_pair(), StackMode.SDN)
    assert sum(m.control_bytes.values()) == m.bytes_tx
    assert sum(m.control.values()) == m.frames_tx


def test_replica_is_deterministic():
    a = run_replica(_pair(), StackMode.SDN)
    b = run_replica(_pair(), StackMode.SDN)
    assert a.control_rows() == b.control_rows()
    assert a.rtt_rows() == b.rtt_rows()
    c = run_replica(_pair(), StackMode.SDN, index=1)
    assert c.seed == 5
