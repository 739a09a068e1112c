"""
Controlador SDN centralizado. Mantiene la vista global de la red (grafo
dirigido armado con los Topology Update), calcula caminos con Dijkstra y
distribuye las entradas de la Flow Table por el SBI.

La lógica de grafo y caminos son funciones puras sobre TopologyGraph; la
clase Controller agrega el registro de entradas, los pedidos al SBI y la
reparación de flujos.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import networkx as nx

from codec import (
    ETX_SCALE,
    MalformedPayload,
    NodeSettings,
    TableMissReport,
    TopologyReport,
    decode_neighbors,
    encode_flow_entries,
    encode_key_features,
    encode_uint,
)
from coap import Code, SbiEndpoint, SbiMessage, SbiResponse
from flow_table import PRIORITY_CONTROLLER, FieldSelector, FlowEntry, KeyFeature, forwarding_entry
from lowpan import CONTROLLER_ADDR, LowpanError, parse_frame
from models import ControlCategory, PathMetric, SdnParams
from routers import flow_engine, network
from sim.kernel import seconds
from trace_logger import TraceEvent, log_trace

logger = logging.getLogger(__name__)


class Unreachable(Exception):
    """No existe camino utilizable hasta el destino pedido."""


@dataclass(frozen=True)
class FlowRequest:
    requester: int
    key_values: Optional[tuple[int, ...]] = None
    frame_bytes: Optional[bytes] = None
    received_at: int = 0

    @classmethod
    def from_report(cls, report: TableMissReport, now: int) -> "FlowRequest":
        values = tuple(report.key_values) if report.key_values is not None else None
        return cls(report.node_addr, values, report.frame_bytes, now)


# --- Grafo de topología ---
class TopologyGraph:
    """
    Grafo dirigido: el reporte de A crea las aristas A->B. Una arista sólo
    es utilizable mientras es más reciente que 2 períodos de su reportante.
    """

    def __init__(self):
        self.g = nx.DiGraph()

    def __contains__(self, addr: int) -> bool:
        return addr in self.g

    @property
    def nodes(self) -> list[int]:
        return sorted(self.g.nodes)

    def usable_edges(self) -> dict[tuple[int, int], int]:
        return {
            (u, v): d["etx"]
            for u, v, d in self.g.edges(data=True)
            if not d["stale"] and not self.g.nodes[u].get("stale", False) and not self.g.nodes[v].get("stale", False)
        }

    def merge_report(self, report: TopologyReport, now: int) -> bool:
        """Incorpora el reporte. Devuelve True si cambió el conjunto de aristas utilizables o sus costos."""
        before = self.usable_edges()
        addr = report.node_addr
        self.g.add_node(
            addr,
            battery=report.battery_level,
            last_report=now,
            period_us=seconds(report.update_period_s),
            stale=False,
        )
        reported = set()
        for n in report.neighbors:
            reported.add(n.addr)
            if n.addr not in self.g:
                self.g.add_node(n.addr, stale=False)
            self.g.add_edge(addr, n.addr, etx=n.etx_x128, rssi=n.rssi_dbm, last_seen=now, stale=False)
        for _, v, d in self.g.out_edges(addr, data=True):
            if v not in reported:
                d["stale"] = True
        return self.usable_edges() != before

    def expire(self, now: int) -> dict:
        """Quita aristas viejas y marca como stale los nodos con 2 reportes perdidos."""
        old_edges = []
        for u, v, d in self.g.edges(data=True):
            period = self.g.nodes[u].get("period_us")
            if period is not None and now - d["last_seen"] > 2 * period:
                old_edges.append((u, v))
        self.g.remove_edges_from(old_edges)

        stale_nodes = []
        for addr, d in self.g.nodes(data=True):
            period = d.get("period_us")
            if period is None or d.get("stale"):
                continue
            if now - d["last_report"] > 2 * period:
                d["stale"] = True
                stale_nodes.append(addr)
        if old_edges or stale_nodes:
            logger.debug(f"Grafo: {len(old_edges)} aristas vencidas, nodos stale {stale_nodes}")
        return {"edges_removed": old_edges, "nodes_stale": stale_nodes}

    def usable_view(self) -> nx.DiGraph:
        return nx.subgraph_view(
            self.g,
            filter_node=lambda n: not self.g.nodes[n].get("stale", False),
            filter_edge=lambda u, v: not self.g.edges[u, v]["stale"],
        )

    def snapshot(self) -> dict:
        return {
            "nodes": [
                {"addr": n, **d} for n, d in sorted(self.g.nodes(data=True))
            ],
            "edges": [
                {"src": u, "dst": v, **d} for u, v, d in sorted(self.g.edges(data=True), key=lambda e: (e[0], e[1]))
            ],
        }


def path_cost(graph: TopologyGraph, path: list[int], metric: PathMetric = PathMetric.ETX) -> int:
    if metric is PathMetric.HOP:
        return ETX_SCALE * (len(path) - 1)
    return sum(graph.g.edges[u, v]["etx"] for u, v in zip(path, path[1:]))


def compute_path(graph: TopologyGraph, src: int, dst: int, metric: PathMetric = PathMetric.ETX) -> list[int]:
    """
    Camino de costo mínimo (suma de ETX, o saltos) sobre las aristas
    utilizables. Los empates se resuelven por el camino lexicográficamente menor.
    """
    if src not in graph or dst not in graph:
        raise Unreachable(f"nodo desconocido: {src if src not in graph else dst}")
    if src == dst:
        return [src]
    view = graph.usable_view()
    if src not in view or dst not in view:
        raise Unreachable(f"{src} o {dst} está stale")
    try:
        return min(nx.all_shortest_paths(view, src, dst, weight="etx" if metric is PathMetric.ETX else None))
    except nx.NetworkXNoPath:
        raise Unreachable(f"sin camino de {src} a {dst}") from None


def synthesize_entries(path: list[int], final: int, ttl_s: float) -> dict[int, list[FlowEntry]]:
    """Entradas hacia `final` a lo largo del camino, más las del sentido inverso hacia path[0]."""
    if len(path) < 2:
        return {}
    out: dict[int, list[FlowEntry]] = {}
    for here, nxt in zip(path, path[1:]):
        out.setdefault(here, []).append(forwarding_entry(PRIORITY_CONTROLLER, nxt, ttl_s, final=final))
    back = list(reversed(path))
    for here, nxt in zip(back, back[1:]):
        out.setdefault(here, []).append(forwarding_entry(PRIORITY_CONTROLLER, nxt, ttl_s, final=path[0]))
    return out


# --- Controlador ---
@dataclass
class _Registered:
    entry: FlowEntry
    expires_at: int


@dataclass
class ControllerStats:
    reports: int = 0
    requests: int = 0
    unreachable: int = 0
    pushes: int = 0
    push_failures: int = 0
    repairs: int = 0
    reconfigurations: int = 0


class Controller:
    def __init__(
        self,
        params: SdnParams,
        scheduler,
        send: Callable[[int, SbiMessage, ControlCategory], None],
        gateway: int,
        key_features: Optional[list[KeyFeature]] = None,
    ):
        self.params = params
        self.scheduler = scheduler
        self.gateway = gateway
        self.key_features = list(params.key_features if key_features is None else key_features)
        self.graph = TopologyGraph()
        self.registry: dict[int, dict[int, _Registered]] = {}
        self.flows: dict[tuple[int, int], list[int]] = {}
        self.configured: set[int] = set()
        # Configuración confirmada por nodo; sin entrada rige la global
        self.node_key_features: dict[int, list[KeyFeature]] = {}
        self.node_periods: dict[int, int] = {}
        self.stats = ControllerStats()
        self.endpoint = SbiEndpoint(self, CONTROLLER_ADDR, scheduler, send)
        self.endpoint.include_router(network.router, prefix="/network")
        self.endpoint.include_router(flow_engine.router, prefix="/flow-engine")

    @property
    def metric(self) -> PathMetric:
        return self.params.path_metric

    @property
    def entry_ttl_s(self) -> float:
        return max(self.params.default_ttl_s, 2 * self.params.update_period_s)

    # --- Network ---
    def merge_report(self, report: TopologyReport) -> bool:
        now = self.scheduler.now
        self.stats.reports += 1
        self.graph.expire(now)
        changed = self.graph.merge_report(report, now)
        log_trace(TraceEvent.TOPOLOGY_MERGED, now, report.node_addr, {
            "neighbors": [n.addr for n in report.neighbors], "changed": changed,
        })
        if changed and self.params.repair and self.flows:
            self.repair()
        addr = report.node_addr
        if addr in self.configured and report.update_period_s != self.period_for(addr):
            # La configuración inicial se perdió o el nodo se desvió: se reenvía el período
            logger.debug(f"Nodo {addr} reporta cada {report.update_period_s} s en lugar de {self.period_for(addr)} s")
            self.configure_update_period(addr, self.period_for(addr))
        return changed

    def period_for(self, addr: int) -> int:
        return self.node_periods.get(addr, max(1, int(round(self.params.update_period_s))))

    def features_for(self, addr: int) -> list[KeyFeature]:
        return self.node_key_features.get(addr, self.key_features)

    def settings_for(self, addr: int) -> Optional[NodeSettings]:
        """Configuración inicial; sólo la primera vez que el nodo reporta."""
        if addr in self.configured:
            return None
        self.configured.add(addr)
        return NodeSettings(
            update_period_s=self.period_for(addr),
            key_features=list(self.features_for(addr)),
            default_ttl_s=int(round(self.params.default_ttl_s)),
        )

    # --- Flow Engine ---
    def resolve_final(self, req: FlowRequest) -> int:
        """Destino final del pedido, leído con las key features del nodo que lo envía."""
        if req.key_values is not None:
            for i, k in enumerate(self.features_for(req.requester)):
                if k.field is FieldSelector.MESH_FINAL and k.offset_bits == 0 and k.size_bits == 16:
                    if i < len(req.key_values):
                        return req.key_values[i]
            raise Unreachable("los valores clave no incluyen el destino final")
        try:
            parsed = parse_frame(req.frame_bytes or b"")
        except LowpanError as exc:
            raise Unreachable(f"trama ilegible: {exc}") from exc
        if parsed.mesh is None:
            raise Unreachable("la trama no tiene cabecera mesh")
        return parsed.mesh.final

    def _path(self, src: int, dst: int) -> list[int]:
        path = compute_path(self.graph, src, dst, self.metric)
        log_trace(TraceEvent.PATH_COMPUTED, self.scheduler.now, src, {
            "dst": dst, "path": path, "cost": path_cost(self.graph, path, self.metric),
        })
        return path

    def _register(self, entries: dict[int, list[FlowEntry]], now: int) -> set[int]:
        """Actualiza el registro. Devuelve los nodos cuyas entradas cambiaron."""
        changed = set()
        expires_at = now + seconds(self.entry_ttl_s)
        for node, node_entries in entries.items():
            table = self.registry.setdefault(node, {})
            for e in node_entries:
                final = e.rules[0].value
                current = table.get(final)
                if current is None or current.expires_at <= now or current.entry.actions != e.actions:
                    changed.add(node)
                table[final] = _Registered(e, expires_at)
        return changed

    def handle_flow_engine_post(self, req: FlowRequest) -> list[FlowEntry]:
        """
        Calcula el camino solicitante -> destino final, devuelve las entradas del
        solicitante y envía PUT /flow-table al resto de los nodos cuyo estado cambió.
        """
        now = self.scheduler.now
        self.stats.requests += 1
        self.graph.expire(now)
        try:
            final = self.resolve_final(req)
            path = self._path(req.requester, final)
        except Unreachable:
            self.stats.unreachable += 1
            raise
        if len(path) < 2:
            return []

        entries = synthesize_entries(path, final, self.entry_ttl_s)
        changed = self._register(entries, now)
        self.flows[(req.requester, final)] = path
        for node in path:
            if node != req.requester and node in changed:
                self.push(node, entries[node])
        return entries.get(req.requester, [])

    def handle_flow_engine_get(self, node: int, now: int) -> list[FlowEntry]:
        table = self.registry.get(node, {})
        return [r.entry for _, r in sorted(table.items()) if r.expires_at > now]

    def push(self, node: int, entries: list[FlowEntry]) -> None:
        self.stats.pushes += 1

        def on_response(resp: SbiResponse):
            if not resp.code.is_success:
                logger.debug(f"PUT /flow-table en {node} respondió {resp.code.dotted}")
                self.stats.push_failures += 1

        def on_timeout(exc):
            # El nodo no confirmó: se olvida su estado para volver a enviarlo en el próximo pedido
            logger.debug(f"PUT /flow-table a {node} sin confirmar: {exc}")
            self.stats.push_failures += 1
            self.registry.pop(node, None)

        self.endpoint.request(node, Code.PUT, "flow-table", encode_flow_entries(entries),
                              on_response=on_response, on_timeout=on_timeout)

    def repair(self) -> int:
        """Recalcula los flujos sintetizados y reenvía los caminos que cambiaron."""
        now = self.scheduler.now
        repaired = 0
        for (src, final), old in sorted(self.flows.items()):
            try:
                path = compute_path(self.graph, src, final, self.metric)
            except Unreachable:
                logger.debug(f"Flujo {src}->{final} sin camino tras el cambio de topología")
                del self.flows[(src, final)]
                continue
            if path == old:
                continue
            self.flows[(src, final)] = path
            entries = synthesize_entries(path, final, self.entry_ttl_s)
            for node in sorted(self._register(entries, now)):
                self.push(node, entries[node])
            repaired += 1
        if repaired:
            self.stats.repairs += repaired
            logger.debug(f"🔧 Controlador: {repaired} flujos reparados")
        return repaired

    # --- Consultas a los recursos del nodo ---
    def query(
        self,
        node: int,
        path: str,
        code: Code = Code.GET,
        payload: bytes = b"",
        on_response: Optional[Callable[[SbiResponse], None]] = None,
        on_timeout=None,
    ) -> SbiMessage:
        return self.endpoint.request(node, code, path, payload, on_response=on_response, on_timeout=on_timeout)

    def _reconfigure(self, node: int, path: str, payload: bytes, on_success: Callable[[], None]) -> SbiMessage:
        self.stats.reconfigurations += 1

        def on_response(resp: SbiResponse):
            if resp.code.is_success:
                on_success()
            else:
                logger.debug(f"POST /{path} en {node} respondió {resp.code.dotted}")

        return self.query(node, path, Code.POST, payload, on_response=on_response,
                          on_timeout=lambda exc: logger.debug(f"POST /{path} a {node} sin confirmar: {exc}"))

    def configure_update_period(self, node: int, period_s: int) -> SbiMessage:
        """Cambia el período de Topology Update de un nodo."""
        period_s = max(1, int(period_s))
        self.node_periods[node] = period_s
        return self._reconfigure(node, "update-period", encode_uint(period_s), lambda: None)

    def configure_key_features(self, node: int, features: list[KeyFeature]) -> SbiMessage:
        """
        Cambia las key features de un nodo. Los pedidos del nodo se siguen
        leyendo con las anteriores hasta que confirma el cambio.
        """
        features = list(features)

        def confirmed():
            self.node_key_features[node] = features
            logger.info(f"🔑 Nodo {node}: key features {[k.field.name for k in features]}")

        return self._reconfigure(node, "key-feature", encode_key_features(features), confirmed)

    def refresh_neighbors(self, node: int) -> SbiMessage:
        """Lee GET /neighbors del nodo y lo incorpora al grafo como un reporte."""
        def on_response(resp: SbiResponse):
            if not resp.code.is_success:
                logger.debug(f"GET /neighbors en {node} respondió {resp.code.dotted}")
                return
            try:
                neighbors = decode_neighbors(resp.payload)
            except MalformedPayload as exc:
                logger.debug(f"Vecinos inválidos de {node}: {exc}")
                return
            battery = self.graph.g.nodes[node].get("battery", 100) if node in self.graph else 100
            self.merge_report(TopologyReport(
                node_addr=node, battery_level=battery, update_period_s=self.period_for(node), neighbors=neighbors,
            ))

        return self.query(node, "neighbors", Code.GET, on_response=on_response,
                          on_timeout=lambda exc: logger.debug(f"GET /neighbors a {node} sin respuesta: {exc}"))

    def snapshot(self) -> dict:
        return {
            "graph": self.graph.snapshot(),
            "flows": [{"src": s, "final": f, "path": p} for (s, f), p in sorted(self.flows.items())],
            "stats": self.stats.__dict__,
        }
