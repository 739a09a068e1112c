"""
MAC CSMA/CA simplificado con ACK de enlace y reintentos.

Cada intento: backoff uniforme, CCA (si el medio está ocupado se vuelve a
sortear el backoff, hasta cca_max_redraws veces), trama de datos y espera del
ACK. Los broadcasts se envían una sola vez y no esperan ACK.
"""
import logging
from collections import deque
from dataclasses import dataclass, replace
from typing import Callable, Optional

from lowpan import BROADCAST_ADDR, Frame, on_air_bytes
from models import MacParams

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class AckFrame:
    mac_src: int
    mac_dst: int
    seq: int


@dataclass
class _Job:
    frame: Frame
    on_result: Optional[Callable[[bool, int], None]] = None
    attempts: int = 0
    redraws: int = 0

    @property
    def unicast(self) -> bool:
        return self.frame.mac_dst != BROADCAST_ADDR


class CsmaMac:
    def __init__(
        self,
        addr: int,
        scheduler,
        channel,
        params: MacParams,
        rng,
        on_frame: Callable[[Frame, int], None],
        on_overhear: Optional[Callable[[int, int], None]] = None,
        on_link_result: Optional[Callable[[int, Optional[int]], None]] = None,
    ):
        self.addr = addr
        self.scheduler = scheduler
        self.channel = channel
        self.params = params
        self.rng = rng
        self.on_frame = on_frame
        self.on_overhear = on_overhear
        self.on_link_result = on_link_result

        self._queue: deque[_Job] = deque()
        self._current: Optional[_Job] = None
        self._seq = 0
        self._last_seq: dict[int, int] = {}
        self._ack_timer = None
        self._ack_due_until = 0
        self._guard_until = 0
        self.ack_airtime_us = channel.airtime_us(params.ack_bytes)
        channel.attach(addr, self)

    @property
    def idle(self) -> bool:
        return self._current is None and not self._queue

    @property
    def backlog(self) -> int:
        return len(self._queue) + (1 if self._current is not None else 0)

    def send(self, frame: Frame, on_result: Optional[Callable[[bool, int], None]] = None) -> None:
        self._queue.append(_Job(frame, on_result))
        if self._current is None:
            self._next()

    def _next(self) -> None:
        if self._current is not None or not self._queue:
            return
        job = self._queue.popleft()
        self._seq = (self._seq + 1) & 0xFF
        job.frame = replace(job.frame, mac_src=self.addr, seq=self._seq)
        self._current = job
        self._attempt()

    def _attempt(self) -> None:
        job = self._current
        job.attempts += 1
        job.redraws = 0
        self._backoff()

    def _backoff(self) -> None:
        self.scheduler.schedule(self.rng.randint(0, self.params.backoff_max_us), self._cca)

    def _medium_busy(self) -> bool:
        now = self.scheduler.now
        return (
            self.channel.is_busy(self.addr)
            or self._ack_timer is not None
            or now < self._ack_due_until
            or now < self._guard_until
        )

    def _cca(self) -> None:
        job = self._current
        if self._medium_busy():
            job.redraws += 1
            if job.redraws > self.params.cca_max_redraws:
                self._attempt_failed()
            else:
                self._backoff()
            return
        self.channel.transmit(self.addr, job.frame, on_air_bytes(job.frame), on_done=self._tx_done)

    def _tx_done(self, _tx) -> None:
        job = self._current
        if not job.unicast:
            self._complete(True)
            return
        self._ack_timer = self.scheduler.schedule(self.params.ack_timeout_us, self._ack_timeout)

    def _ack_timeout(self) -> None:
        self._ack_timer = None
        self._attempt_failed()

    def _attempt_failed(self) -> None:
        job = self._current
        if job.unicast and job.attempts <= self.params.max_retries:
            self._attempt()
        else:
            self._complete(False)

    def _complete(self, ok: bool) -> None:
        job = self._current
        self._current = None
        if job.unicast and self.on_link_result is not None:
            self.on_link_result(job.frame.mac_dst, job.attempts if ok else None)
        if not ok:
            logger.debug(f"MAC {self.addr}: trama a {job.frame.mac_dst} descartada tras {job.attempts} intentos")
        if job.on_result is not None:
            job.on_result(ok, job.attempts)
        self._next()

    # --- Recepción ---
    def on_receive(self, tx, rssi_dbm: int) -> None:
        f = tx.frame
        now = self.scheduler.now
        if tx.is_ack:
            job = self._current
            if (
                self._ack_timer is not None
                and f.mac_dst == self.addr
                and f.mac_src == job.frame.mac_dst
                and f.seq == job.frame.seq
            ):
                self._ack_timer.cancel()
                self._ack_timer = None
                self._complete(True)
            return

        if self.on_overhear is not None:
            self.on_overhear(f.mac_src, rssi_dbm)

        if f.mac_dst == self.addr:
            self._ack_due_until = now + self.params.turnaround_us + self.ack_airtime_us
            self.scheduler.schedule(self.params.turnaround_us, lambda: self._send_ack(f.mac_src, f.seq))
            if self._last_seq.get(f.mac_src) == f.seq:
                return
            self._last_seq[f.mac_src] = f.seq
            self.on_frame(f, rssi_dbm)
        elif f.mac_dst == BROADCAST_ADDR:
            self.on_frame(f, rssi_dbm)
        else:
            self._guard_until = max(self._guard_until, now + self.params.turnaround_us + self.ack_airtime_us)

    def on_signal_end(self, tx) -> None:
        if not tx.is_ack and tx.frame.mac_dst != BROADCAST_ADDR:
            self._guard_until = max(self._guard_until, self.scheduler.now + self.params.turnaround_us + self.ack_airtime_us)

    def _send_ack(self, dst: int, seq: int) -> None:
        if self.channel.is_transmitting(self.addr):
            return
        self.channel.transmit(self.addr, AckFrame(self.addr, dst, seq), self.params.ack_bytes, is_ack=True)
