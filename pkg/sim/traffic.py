"""
Tráfico de aplicación: eco UDP periódico hacia el servidor externo o hacia
un par M2M dentro de la WSN. El RTT se mide en la capa de aplicación del
emisor.
"""
import logging
import struct
from dataclasses import dataclass
from typing import Optional

from lowpan import SERVER_ADDR, Datagram, DatagramKind, build_datagram
from models import ControlCategory, TrafficParams
from sim.kernel import seconds
from sim.metrics import RttSample

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EchoPacket:
    seq: int
    origin: int
    sent_at: int
    is_reply: bool = False
    request_trail: tuple[int, ...] = ()

    def to_bytes(self) -> bytes:
        return struct.pack(">HIB", self.origin, self.seq, int(self.is_reply))


def echo_reply(d: Datagram, src: int, now: int) -> Datagram:
    """Respuesta con la misma longitud de carga que el pedido."""
    pkt: EchoPacket = d.content
    reply = EchoPacket(pkt.seq, pkt.origin, pkt.sent_at, True, tuple(d.trail))
    return build_datagram(
        src, d.src, DatagramKind.UDP_DATA,
        payload=reply.to_bytes(), payload_len=d.app_payload_len, header_len=d.compressed_header_len,
        created_at=now, content=reply, category=ControlCategory.DATA,
    )


class EchoApp:
    """
    Aplicación de un nodo. Si tiene destino envía un pedido por ciclo con
    período ~ U(min, max); en cualquier caso responde los pedidos M2M que recibe.
    """

    def __init__(self, node, scheduler, rng, traffic: TrafficParams, metrics, destination: Optional[int] = None, header_len: int = 10):
        self.node = node
        self.scheduler = scheduler
        self.rng = rng
        self.traffic = traffic
        self.metrics = metrics
        self.destination = destination
        self.header_len = header_len
        self._seq = 0
        self._pending: dict[int, int] = {}
        self.sent = 0
        self.replies = 0
        node.app = self.on_datagram

    @property
    def addr(self) -> int:
        return self.node.addr

    def draw_period(self) -> float:
        return self.rng.uniform(self.traffic.period_min_s, self.traffic.period_max_s)

    def start(self) -> None:
        if self.destination is None:
            return
        offset = self.rng.uniform(0, self.draw_period())
        self.scheduler.schedule(seconds(offset), self._fire)

    def _fire(self) -> None:
        self.send_request()
        self.scheduler.schedule(seconds(self.draw_period()), self._fire)

    def send_request(self) -> Datagram:
        now = self.scheduler.now
        self._seq += 1
        pkt = EchoPacket(self._seq, self.addr, now)
        d = build_datagram(
            self.addr, self.destination, DatagramKind.UDP_DATA,
            payload=pkt.to_bytes(), payload_len=self.traffic.payload_bytes, header_len=self.header_len,
            created_at=now, content=pkt, category=ControlCategory.DATA,
        )
        self._pending[pkt.seq] = now
        self.sent += 1
        self.metrics.echo_sent += 1
        self.node.send_datagram(d)
        return d

    def on_datagram(self, d: Datagram) -> None:
        pkt = d.content
        if not isinstance(pkt, EchoPacket):
            return
        now = self.scheduler.now
        if not pkt.is_reply:
            self.node.send_datagram(echo_reply(d, self.addr, now))
            return
        if pkt.origin != self.addr:
            return
        sent_at = self._pending.pop(pkt.seq, None)
        if sent_at is None:
            logger.debug(f"Nodo {self.addr}: respuesta duplicada o tardía seq={pkt.seq}")
            return
        self.replies += 1
        self.metrics.record_rtt(RttSample(
            send_time_us=sent_at,
            rtt_us=now - sent_at,
            src=self.addr,
            dst=self.destination,
            path_fwd=pkt.request_trail,
            path_back=tuple(d.trail),
        ))


class EchoServer:
    """Servidor UDP externo: devuelve cada pedido por el enlace cableado."""

    def __init__(self, scheduler, link, gateway):
        self.scheduler = scheduler
        self.link = link
        self.gateway = gateway
        self.echoed = 0

    def receive(self, d: Datagram) -> None:
        if not isinstance(d.content, EchoPacket) or d.content.is_reply:
            return
        self.echoed += 1
        self.link.send(self.gateway.inject, echo_reply(d, SERVER_ADDR, self.scheduler.now))
