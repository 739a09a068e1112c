"""
Pila de protocolos de un nodo simulado.

Modo SDN: la subcapa SDN intercepta cada trama 6LoWPAN; los mensajes RPL y
las tramas dirigidas al propio nodo se entregan sin consultar la Flow Table,
el resto se busca en la tabla y un table miss se resuelve con el controlador
a través del SBI (Local Controller). Sólo se usan DIO, no hay DAO.

Modo RPL: línea base route-over en modo storing. Cada salto reensambla el
datagrama, decide el próximo salto con la tabla de rutas (o el padre) y lo
vuelve a fragmentar.
"""
import itertools
import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional

from codec import (
    MalformedPayload,
    NodeSettings,
    TableMissReport,
    TopologyReport,
    decode_flow_entries,
    decode_node_settings,
    encode_table_miss,
    encode_topology_report,
    encode_uint,
)
from coap import Code, SbiEndpoint, SbiMessage, SbiResponse
from flow_table import (
    PRIORITY_ONE_HOP,
    PRIORITY_UPSTREAM,
    Disposition,
    FlowEntry,
    FlowTable,
    FlowTableError,
    InstallResult,
    apply_actions,
    extract_window,
    forwarding_entry,
)
from lowpan import (
    BROADCAST_ADDR,
    CONTROLLER_ADDR,
    HOPS_LEFT_INIT,
    Datagram,
    DatagramKind,
    Frame,
    LinkLimits,
    LowpanError,
    MeshHeader,
    ReassemblyBuffer,
    ReassemblyStatus,
    build_datagram,
    fragment,
    is_external,
    reassemble,
)
from models import ControlCategory, NodeConfig, NodeRole, NodeSpec, Scenario, StackMode, UpstreamMatch
from neighbors import NeighborTable
from routers import flow_table as flow_table_router
from routers import key_feature, neighbors as neighbors_router, update_period
from rpl import DaoContent, DioContent, Rpl
from sim.costs import hop_cost
from sim.kernel import seconds
from sim.mac import CsmaMac
from trace_logger import TraceEvent, log_trace

logger = logging.getLogger(__name__)


@dataclass
class _Buffered:
    key: tuple
    frame: Frame
    originated: bool


class Node:
    def __init__(self, spec: NodeSpec, scenario: Scenario, mode: StackMode, scheduler, channel, rng, metrics, gateway: int):
        self.addr = spec.id
        self.spec = spec
        self.mode = mode
        self.scheduler = scheduler
        self.rng = rng
        self.metrics = metrics
        self.costs = scenario.costs
        self.sdn = scenario.sdn
        self.config = NodeConfig(
            addr=spec.id,
            role=spec.role,
            mode=mode,
            gateway=gateway,
            update_period_s=scenario.sdn.update_period_s,
            key_features=list(scenario.sdn.key_features),
            miss_queue_cap=scenario.sdn.miss_queue_cap,
            default_ttl_s=scenario.sdn.default_ttl_s,
        )
        self.limits = LinkLimits(scenario.link.max_frame, scenario.link.mac_overhead, scenario.link.payload_window)
        self.link = scenario.link

        self.neighbors = NeighborTable(scenario.mac.max_retries)
        self.mac = CsmaMac(
            self.addr, scheduler, channel, scenario.mac, rng,
            on_frame=self.on_frame_receive,
            on_overhear=self.overhear,
            on_link_result=self.neighbors.etx_update,
        )
        self.rpl = Rpl(
            self.addr, gateway, scheduler, rng, scenario.rpl, self.neighbors,
            send_dio=self._send_dio,
            send_dao=self._send_dao if mode is StackMode.RPL else None,
            on_parent_change=self._on_parent_change,
            on_route_rejected=self._on_route_rejected,
        )
        self.reassembly = ReassemblyBuffer(seconds(scenario.link.reassembly_timeout_s))
        self.flow_table = FlowTable(scenario.sdn.flow_table_capacity)
        self._aged_at = 0
        self._tags = itertools.count(1)

        # Capa superior y salida cableada (las conecta la réplica)
        self.app: Optional[Callable[[Datagram], None]] = None
        self.uplink_sink: Optional[Callable[[Datagram], None]] = None

        self._miss_queue: list[_Buffered] = []
        self._outstanding: set[tuple] = set()
        self._report_timer = None
        self.reports_sent = 0
        self._fetched = False

        self.endpoint: Optional[SbiEndpoint] = None
        if mode is StackMode.SDN:
            self.endpoint = SbiEndpoint(self, self.addr, scheduler, self.send_sbi)
            self.endpoint.include_router(flow_table_router.router, prefix="/flow-table")
            self.endpoint.include_router(update_period.router, prefix="/update-period")
            self.endpoint.include_router(key_feature.router, prefix="/key-feature")
            self.endpoint.include_router(neighbors_router.router, prefix="/neighbors")

    @property
    def is_gateway(self) -> bool:
        return self.config.role is NodeRole.BORDER_ROUTER

    @property
    def gateway(self) -> int:
        return self.config.gateway

    def start(self) -> None:
        self.rpl.start()
        if self.is_gateway and self.mode is StackMode.SDN:
            self._schedule_report(self.sdn.first_report_delay_s)

    def _diag(self, cause: str, **details) -> None:
        self.metrics.record_diagnostic(self.scheduler.now, self.addr, cause, **details)

    # --- Vecinos y RPL ---
    def overhear(self, src: int, rssi_dbm: int) -> None:
        _, is_new = self.neighbors.overhear(src, rssi_dbm, self.scheduler.now)
        if is_new and self.mode is StackMode.SDN:
            self._install(forwarding_entry(PRIORITY_ONE_HOP, src, 2 * self.config.update_period_s, final=src))

    def _on_parent_change(self, old: Optional[int], new: int) -> None:
        if self.mode is not StackMode.SDN:
            return
        self.install_bootstrap_rules()
        if old is None:
            self._schedule_report(self.sdn.first_report_delay_s)

    def _on_route_rejected(self, target: int) -> None:
        self.metrics.routes_rejected += 1
        self._diag("route_table_full", target=target)

    def _send_dio(self, dio: DioContent) -> None:
        d = build_datagram(
            self.addr, BROADCAST_ADDR, DatagramKind.RPL_DIO,
            payload_len=self.link.dio_bytes, header_len=0,
            created_at=self.scheduler.now, content=dio, category=ControlCategory.DIO,
        )
        self._send_link_local(d, BROADCAST_ADDR)

    def _send_dao(self, parent: int, dao: DaoContent) -> None:
        d = build_datagram(
            self.addr, parent, DatagramKind.RPL_DAO,
            payload_len=self.link.dao_bytes, header_len=0,
            created_at=self.scheduler.now, content=dao, category=ControlCategory.DAO,
        )
        self.metrics.dao_datagrams += 1
        self._send_link_local(d, parent)

    def _send_link_local(self, d: Datagram, mac_dst: int) -> None:
        for f in fragment(d, None, self.limits, next(self._tags), self.addr, mac_dst):
            self.mac.send(f, self._on_mac_result)

    def _on_rpl(self, frame: Frame) -> None:
        d = frame.datagram
        if d.kind is DatagramKind.RPL_DIO:
            self.rpl.on_dio(d.content)
        elif self.rpl.dao_enabled:
            self.rpl.on_dao(d.content, frame.mac_src)

    # --- Flow Table ---
    def _age_table(self) -> None:
        now = self.scheduler.now
        if now > self._aged_at:
            self.flow_table.tick((now - self._aged_at) / 1_000_000)
            self._aged_at = now

    def _install(self, entry: FlowEntry) -> InstallResult:
        self._age_table()
        if entry.ttl_s == 0:
            entry = entry.model_copy(update={"ttl_s": self.config.default_ttl_s, "timeout_s": self.config.default_ttl_s})
        result = self.flow_table.install(entry, self.scheduler.now)
        event = TraceEvent.FLOW_REJECTED if result is InstallResult.REJECTED else TraceEvent.FLOW_INSTALLED
        log_trace(event, self.scheduler.now, self.addr, {
            "priority": entry.priority, "rules": [r.model_dump(mode="json") for r in entry.rules], "result": result.value,
        })
        if result is InstallResult.REJECTED:
            self._diag("flow_table_full", priority=entry.priority)
        return result

    def install_entries(self, entries: list[FlowEntry]) -> list[InstallResult]:
        return [self._install(e) for e in entries]

    def install_bootstrap_rules(self) -> list[InstallResult]:
        """Entradas de un salto por vecino y la entrada upstream hacia el padre RPL."""
        ttl = 2 * self.config.update_period_s
        results = [
            self._install(forwarding_entry(PRIORITY_ONE_HOP, nbr, ttl, final=nbr))
            for nbr in self.neighbors.addrs
        ]
        parent = self.rpl.parent
        if parent is not None:
            final = self.gateway if self.sdn.upstream_match is UpstreamMatch.GATEWAY else None
            results.append(self._install(forwarding_entry(PRIORITY_UPSTREAM, parent, ttl, final=final)))
        return results

    # --- Emisión ---
    def send_datagram(self, d: Datagram) -> None:
        """Datagrama originado (o reinyectado por el border router) en este nodo."""
        d.trail.append(self.addr)
        if is_external(d.dst):
            if self.is_gateway:
                self._to_uplink(d)
                return
        if self.mode is StackMode.RPL:
            self._route_over_send(d)
            return

        final = self.gateway if is_external(d.dst) else d.dst
        mesh = MeshHeader(HOPS_LEFT_INIT, self.addr, final)
        try:
            frames = fragment(d, mesh, self.limits, next(self._tags), self.addr, BROADCAST_ADDR)
        except LowpanError as exc:
            self._diag("datagram_rejected", error=str(exc))
            return
        for f in frames:
            self._sdn_dispatch(f, originated=True)

    def send_sbi(self, dst: int, msg: SbiMessage, category: ControlCategory) -> None:
        d = build_datagram(
            self.addr, dst, DatagramKind.SBI, payload=msg.to_bytes(),
            header_len=self.link.compressed_header_len,
            created_at=self.scheduler.now, content=msg, category=category,
        )
        self.send_datagram(d)

    def from_controller(self, dst: int, msg: SbiMessage, category: ControlCategory) -> None:
        """Mensaje del controlador que llega por el enlace cableado (sólo border router)."""
        if dst == self.addr:
            self.endpoint.receive(CONTROLLER_ADDR, msg)
            return
        d = build_datagram(
            CONTROLLER_ADDR, dst, DatagramKind.SBI, payload=msg.to_bytes(),
            header_len=self.link.compressed_header_len,
            created_at=self.scheduler.now, content=msg, category=category,
        )
        self.send_datagram(d)

    def inject(self, d: Datagram) -> None:
        """Datagrama externo (servidor UDP) que entra a la WSN por el border router."""
        self.send_datagram(d)

    def _to_uplink(self, d: Datagram) -> None:
        if self.uplink_sink is None:
            self._diag("no_uplink")
            return
        self.uplink_sink(d)

    def _on_mac_result(self, ok: bool, attempts: int) -> None:
        if not ok:
            self._diag("mac_failed", attempts=attempts)

    # --- Recepción ---
    def on_frame_receive(self, frame: Frame, rssi_dbm: int = 0) -> None:
        if frame.kind in (DatagramKind.RPL_DIO, DatagramKind.RPL_DAO):
            self._on_rpl(frame)
            return
        if self.mode is StackMode.RPL:
            self._route_over_receive(frame)
            return
        if frame.mesh is None or frame.mesh.final == self.addr:
            self._deliver_frame(frame)
            return
        self._sdn_dispatch(frame, originated=False)

    def _deliver_frame(self, frame: Frame) -> None:
        try:
            r = reassemble(self.reassembly, frame, self.scheduler.now)
        except LowpanError as exc:
            self._diag("reassembly_error", error=str(exc))
            return
        if r.status is ReassemblyStatus.STALE:
            self._diag("reassembly_timeout")
        elif r.status is ReassemblyStatus.COMPLETE:
            self._deliver(r.datagram)

    def _deliver(self, d: Datagram) -> None:
        if not d.trail or d.trail[-1] != self.addr:
            d.trail.append(self.addr)
        if is_external(d.dst):
            if self.is_gateway:
                self._to_uplink(d)
            else:
                self._diag("external_not_gateway")
            return
        if d.dst != self.addr:
            self._diag("misdelivered", dst=d.dst)
            return
        if d.kind is DatagramKind.SBI:
            if self.endpoint is not None:
                self.endpoint.receive(d.src, d.content)
        elif self.app is not None:
            self.app(d)

    # --- Subcapa SDN ---
    def _sdn_dispatch(self, frame: Frame, originated: bool, allow_miss: bool = True) -> None:
        self._age_table()
        outcome = self.flow_table.lookup(frame)
        if outcome.is_miss:
            if allow_miss:
                self.handle_table_miss(frame, originated)
            else:
                self._diag("miss_unresolved")
            return

        result = apply_actions(frame, outcome.plan)
        for note in result.diagnostics:
            self._diag(note)
        out = result.frame
        if result.disposition is Disposition.TO_UPPER:
            self._deliver_frame(out)
            return
        if result.disposition is Disposition.DROPPED:
            if not result.diagnostics:
                self._diag("flow_drop")
            return
        if out.mesh is not None and out.mesh.hops_left == 0:
            self._diag("hops_exhausted")
            return
        next_hop = result.next_hop
        if next_hop == self.addr:
            self._diag("forward_loop")
            return
        if not originated and out.carries_start and out.datagram is not None:
            out.datagram.trail.append(self.addr)
        out = replace(out, mac_src=self.addr, mac_dst=next_hop)
        if originated:
            self.mac.send(out, self._on_mac_result)
        else:
            delay = hop_cost(StackMode.SDN, 1, self.costs)
            self.scheduler.schedule(delay, lambda: self.mac.send(out, self._on_mac_result))

    def _miss_key(self, frame: Frame) -> tuple[tuple, TableMissReport]:
        features = self.config.key_features
        if features:
            values = [extract_window(frame, k.field, k.offset_bits, k.size_bits) for k in features]
            return tuple(values), TableMissReport(node_addr=self.addr, key_values=values)
        key = ("frame", frame.mesh.originator, frame.mesh.final) if frame.mesh else ("frame",)
        return key, TableMissReport(node_addr=self.addr, frame_bytes=frame.to_bytes())

    def handle_table_miss(self, frame: Frame, originated: bool = False) -> None:
        if not self.is_gateway and self.rpl.parent is None:
            self._diag("no_upstream")
            return
        try:
            key, report = self._miss_key(frame)
        except FlowTableError as exc:
            self._diag("key_feature_absent", error=str(exc))
            return
        if len(self._miss_queue) >= self.config.miss_queue_cap:
            self._diag("miss_queue_full")
            return
        self._miss_queue.append(_Buffered(key, frame, originated))
        if key in self._outstanding:
            return

        self._outstanding.add(key)
        self.metrics.record_table_miss(self.scheduler.now, self.addr, key)
        logger.debug(f"❓ Nodo {self.addr}: table miss {key}, consultando al controlador")
        self.endpoint.request(
            CONTROLLER_ADDR, Code.POST, "flow-engine", encode_table_miss(report),
            on_response=lambda resp: self._on_miss_response(key, resp),
            on_timeout=lambda exc: self._flush_key(key, "miss_timeout"),
        )

    def _on_miss_response(self, key: tuple, resp: SbiResponse) -> None:
        if not resp.code.is_success:
            self._flush_key(key, "miss_error")
            return
        try:
            entries = decode_flow_entries(resp.payload)
        except MalformedPayload as exc:
            logger.debug(f"Respuesta de flow-engine inválida en {self.addr}: {exc}")
            self._flush_key(key, "miss_malformed")
            return
        self.install_entries(entries)
        self._outstanding.discard(key)
        pending = [b for b in self._miss_queue if b.key == key]
        self._miss_queue = [b for b in self._miss_queue if b.key != key]
        for b in pending:
            self._sdn_dispatch(b.frame, b.originated, allow_miss=False)

    def _flush_key(self, key: tuple, cause: str) -> None:
        self._outstanding.discard(key)
        dropped = [b for b in self._miss_queue if b.key == key]
        self._miss_queue = [b for b in self._miss_queue if b.key != key]
        for _ in dropped:
            self._diag(cause)

    @property
    def miss_queue_len(self) -> int:
        return len(self._miss_queue)

    # --- Topology Update ---
    def _schedule_report(self, delay_s: float) -> None:
        if self._report_timer is not None:
            self._report_timer.cancel()
        jittered = delay_s * self.rng.uniform(0.9, 1.1)
        self._report_timer = self.scheduler.schedule(seconds(jittered), self.topology_update)

    def build_report(self) -> TopologyReport:
        return TopologyReport(
            node_addr=self.addr,
            battery_level=self.sdn.battery_level,
            update_period_s=max(1, int(round(self.config.update_period_s))),
            neighbors=self.neighbors.snapshot(),
        )

    def topology_update(self) -> None:
        now = self.scheduler.now
        self.neighbors.purge(now, seconds(2 * self.config.update_period_s))
        self.install_bootstrap_rules()
        self.reports_sent += 1
        self.endpoint.request(
            CONTROLLER_ADDR, Code.POST, "network", encode_topology_report(self.build_report()),
            on_response=self._on_report_response,
            on_timeout=lambda exc: self._diag("report_timeout"),
        )
        self._schedule_report(self.config.update_period_s)

    def _on_report_response(self, resp: SbiResponse) -> None:
        if not resp.code.is_success:
            self._diag("report_rejected", code=resp.code.dotted)
            return
        if resp.payload:
            try:
                self.apply_settings(decode_node_settings(resp.payload))
            except MalformedPayload as exc:
                logger.debug(f"Configuración inválida para {self.addr}: {exc}")
        if self.sdn.proactive_fetch and not self._fetched:
            self._fetched = True
            self.endpoint.request(
                CONTROLLER_ADDR, Code.GET, "flow-engine", encode_uint(self.addr),
                on_response=self._on_fetch_response,
            )

    def _on_fetch_response(self, resp: SbiResponse) -> None:
        if resp.code.is_success:
            try:
                self.install_entries(decode_flow_entries(resp.payload))
            except MalformedPayload as exc:
                logger.debug(f"Entradas inválidas en la consulta proactiva de {self.addr}: {exc}")

    def apply_settings(self, settings: NodeSettings) -> None:
        if settings.key_features is not None:
            self.config.key_features = list(settings.key_features)
        if settings.default_ttl_s is not None:
            self.config.default_ttl_s = max(1, settings.default_ttl_s)
        if settings.update_period_s is not None:
            self.set_update_period(settings.update_period_s)

    def set_update_period(self, period_s: float) -> None:
        self.config.update_period_s = period_s
        if self._report_timer is not None:
            self._schedule_report(period_s)

    # --- Línea base route-over ---
    def _next_hop(self, dst: int) -> Optional[int]:
        route = self.rpl.routes.lookup(dst, self.scheduler.now)
        if route is not None:
            return route
        if self.is_gateway:
            return None
        return self.rpl.parent

    def _route_over_send(self, d: Datagram) -> None:
        next_hop = self._next_hop(d.dst)
        if next_hop is None:
            self._diag("no_route", dst=d.dst)
            return
        try:
            frames = fragment(d, None, self.limits, next(self._tags), self.addr, next_hop)
        except LowpanError as exc:
            self._diag("datagram_rejected", error=str(exc))
            return
        for f in frames:
            self.mac.send(f, self._on_mac_result)

    def _route_over_receive(self, frame: Frame) -> None:
        try:
            r = reassemble(self.reassembly, frame, self.scheduler.now)
        except LowpanError as exc:
            self._diag("reassembly_error", error=str(exc))
            return
        if r.status is ReassemblyStatus.STALE:
            self._diag("reassembly_timeout")
            return
        if r.status is not ReassemblyStatus.COMPLETE:
            return
        d = r.datagram
        if d.dst == self.addr or (self.is_gateway and is_external(d.dst)):
            self._deliver(d)
            return
        d.trail.append(self.addr)
        delay = hop_cost(StackMode.RPL, r.fragments, self.costs)
        self.scheduler.schedule(delay, lambda: self._route_over_send(d))
