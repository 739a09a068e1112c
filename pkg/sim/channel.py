"""
Medio UDGM (Unit Disk Graph Medium): disco de recepción, disco de
interferencia y probabilidades de éxito de transmisión/recepción.

Una transmisión llega a todo nodo dentro de tx_range salvo que en ese receptor
se solape con otra señal (ambas se pierden) o que pierda el sorteo de éxito.
Los nodos entre tx_range e interference_range sólo provocan colisiones.
"""
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Protocol

from models import UdgmParams

logger = logging.getLogger(__name__)


class Outcome(str, enum.Enum):
    DELIVERED = "delivered"
    LOST = "lost"
    COLLIDED = "collided"


class Radio(Protocol):
    def on_receive(self, tx: "Transmission", rssi_dbm: int) -> None: ...

    def on_signal_end(self, tx: "Transmission") -> None: ...


@dataclass(eq=False)
class Transmission:
    sender: int
    frame: Any
    on_air: int
    start: int
    end: int
    is_ack: bool = False
    corrupted: set = field(default_factory=set)
    outcomes: dict = field(default_factory=dict)


def rssi_at(distance_m: float) -> int:
    return int(round(-40 - 25 * math.log10(max(distance_m, 1.0))))


class UdgmChannel:
    def __init__(self, scheduler, positions: dict[int, tuple[float, float]], params: UdgmParams, rng, bitrate_bps: int = 250_000, metrics=None):
        self.scheduler = scheduler
        self.params = params
        self.rng = rng
        self.bitrate_bps = bitrate_bps
        self.metrics = metrics
        self.positions = dict(positions)
        # Pérdidas guionadas para pruebas: loss_hook(frame, receptor) -> True descarta
        self.loss_hook: Optional[Callable[[Any, int], bool]] = None

        ids = sorted(self.positions)
        self.in_range: dict[int, list[int]] = {n: [] for n in ids}
        self.interferers: dict[int, list[int]] = {n: [] for n in ids}
        self.rssi: dict[tuple[int, int], int] = {}
        for a in ids:
            ax, ay = self.positions[a]
            for b in ids:
                if a == b:
                    continue
                bx, by = self.positions[b]
                d = math.hypot(ax - bx, ay - by)
                if d <= params.interference_range_m:
                    self.interferers[a].append(b)
                if d <= params.tx_range_m:
                    self.in_range[a].append(b)
                    self.rssi[(a, b)] = rssi_at(d)

        self._radios: dict[int, Radio] = {}
        self._active: dict[int, list[Transmission]] = {n: [] for n in ids}
        self._transmitting: dict[int, Optional[Transmission]] = {n: None for n in ids}

    def attach(self, addr: int, radio: Radio) -> None:
        self._radios[addr] = radio

    def airtime_us(self, on_air: int) -> int:
        return on_air * 8 * 1_000_000 // self.bitrate_bps

    def is_busy(self, addr: int) -> bool:
        return bool(self._active[addr]) or self._transmitting[addr] is not None

    def is_transmitting(self, addr: int) -> bool:
        return self._transmitting[addr] is not None

    def transmit(self, sender: int, frame: Any, on_air: int, is_ack: bool = False, on_done: Callable[[Transmission], None] = None) -> Transmission:
        if self._transmitting[sender] is not None:
            raise RuntimeError(f"el nodo {sender} ya está transmitiendo")
        now = self.scheduler.now
        tx = Transmission(sender, frame, on_air, now, now + self.airtime_us(on_air), is_ack)
        self._transmitting[sender] = tx

        # Semi-dúplex: lo que el emisor estaba recibiendo se pierde
        for other in self._active[sender]:
            other.corrupted.add(sender)
        for r in self.interferers[sender]:
            if self._active[r]:
                tx.corrupted.add(r)
                for other in self._active[r]:
                    other.corrupted.add(r)
            if self._transmitting[r] is not None:
                tx.corrupted.add(r)
            self._active[r].append(tx)

        if self.metrics is not None and not is_ack:
            self.metrics.record_frame(now, frame, on_air)
        self.scheduler.schedule(tx.end - now, lambda: self._finish(tx, on_done))
        return tx

    def _finish(self, tx: Transmission, on_done) -> None:
        self._transmitting[tx.sender] = None
        for r in self.interferers[tx.sender]:
            self._active[r].remove(tx)

        p = self.params.p_tx_success * self.params.p_rx_success
        for r in self.in_range[tx.sender]:
            if r in tx.corrupted:
                outcome = Outcome.COLLIDED
            elif self.loss_hook is not None and self.loss_hook(tx.frame, r):
                outcome = Outcome.LOST
            elif p < 1.0 and self.rng.random() >= p:
                outcome = Outcome.LOST
            else:
                outcome = Outcome.DELIVERED
            tx.outcomes[r] = outcome
            if self.metrics is not None and not tx.is_ack:
                self.metrics.record_reception(outcome)

        if on_done is not None:
            on_done(tx)
        for r in self.interferers[tx.sender]:
            radio = self._radios.get(r)
            if radio is None:
                continue
            if tx.outcomes.get(r) is Outcome.DELIVERED:
                radio.on_receive(tx, self.rssi[(tx.sender, r)])
            else:
                radio.on_signal_end(tx)


class ExternalLink:
    """Enlace cableado border router <-> controlador/servidor UDP, FIFO y de latencia fija."""

    def __init__(self, scheduler, delay_us: int):
        self.scheduler = scheduler
        self.delay_us = delay_us
        self.messages = 0

    def send(self, deliver: Callable[..., Any], *args) -> None:
        self.messages += 1
        self.scheduler.schedule(self.delay_us, lambda: deliver(*args))
