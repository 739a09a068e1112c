"""
RPL simplificado: DODAG con una sola instancia, rango aditivo por ETX,
temporizador Trickle sin supresión y, en la línea base, modo storing con DAO.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from models import RplParams
from neighbors import NeighborTable
from sim.kernel import seconds
from trace_logger import TraceEvent, log_trace

logger = logging.getLogger(__name__)

ROOT_RANK = 256
INFINITE_RANK = 0xFFFF


@dataclass(frozen=True)
class DioContent:
    sender: int
    rank: int
    root: int
    parent: Optional[int] = None


@dataclass(frozen=True)
class DaoContent:
    sender: int
    target: int
    # No-Path: el emisor dejó de ser hijo del destinatario
    no_path: bool = False


@dataclass
class TrickleTimer:
    i_min_us: int
    doublings: int
    interval_us: int = 0
    next_fire: int = 0
    interval_end: int = 0
    timer: object = None

    @property
    def i_max_us(self) -> int:
        return self.i_min_us << self.doublings


@dataclass
class RplState:
    rank: int = INFINITE_RANK
    preferred_parent: Optional[int] = None
    # Rango más bajo que tuvo el nodo; sólo se adoptan padres por debajo de él
    lowest_rank: int = INFINITE_RANK
    trickle: Optional[TrickleTimer] = None

    @property
    def joined(self) -> bool:
        return self.rank != INFINITE_RANK


@dataclass
class RouteEntry:
    next_hop: int
    expires_at: int


class RoutingTable:
    """Rutas descendentes aprendidas por DAO (destino -> hijo)."""

    def __init__(self, capacity: int = 40):
        self.capacity = capacity
        self._routes: dict[int, RouteEntry] = {}
        self.rejected = 0

    def __len__(self) -> int:
        return len(self._routes)

    def __contains__(self, target: int) -> bool:
        return target in self._routes

    def purge(self, now: int) -> None:
        expired = [t for t, r in self._routes.items() if r.expires_at <= now]
        for target in expired:
            del self._routes[target]

    def add(self, target: int, next_hop: int, expires_at: int, now: int) -> bool:
        self.purge(now)
        route = self._routes.get(target)
        if route is None and len(self._routes) >= self.capacity:
            self.rejected += 1
            return False
        self._routes[target] = RouteEntry(next_hop, expires_at)
        return True

    def drop_via(self, next_hop: int) -> list[int]:
        gone = [t for t, r in self._routes.items() if r.next_hop == next_hop]
        for target in gone:
            del self._routes[target]
        return sorted(gone)

    def lookup(self, target: int, now: int) -> Optional[int]:
        route = self._routes.get(target)
        if route is None or route.expires_at <= now:
            return None
        return route.next_hop

    def items(self, now: int) -> dict[int, int]:
        self.purge(now)
        return {t: r.next_hop for t, r in sorted(self._routes.items())}


class Rpl:
    def __init__(
        self,
        addr: int,
        root: int,
        scheduler,
        rng,
        params: RplParams,
        neighbors: NeighborTable,
        send_dio: Callable[[DioContent], None],
        send_dao: Optional[Callable[[int, DaoContent], None]] = None,
        on_parent_change: Optional[Callable[[Optional[int], int], None]] = None,
        on_route_rejected: Optional[Callable[[int], None]] = None,
    ):
        self.addr = addr
        self.root = root
        self.scheduler = scheduler
        self.rng = rng
        self.params = params
        self.neighbors = neighbors
        self.send_dio = send_dio
        self.send_dao = send_dao
        self.on_parent_change = on_parent_change
        self.on_route_rejected = on_route_rejected
        self.state = RplState(trickle=TrickleTimer(seconds(params.i_min_s), params.doublings))
        self.routes = RoutingTable(params.routing_capacity)
        self._dao_timer = None
        self.dio_sent = 0
        self.dao_sent = 0

    @property
    def is_root(self) -> bool:
        return self.addr == self.root

    @property
    def rank(self) -> int:
        return self.state.rank

    @property
    def parent(self) -> Optional[int]:
        return self.state.preferred_parent

    @property
    def dao_enabled(self) -> bool:
        return self.send_dao is not None

    @property
    def route_lifetime_us(self) -> int:
        return seconds(self.params.dao_period_s * self.params.route_lifetime_periods)

    def start(self) -> None:
        if self.is_root:
            self.state.rank = ROOT_RANK
            self._trickle_reset()

    # --- Trickle ---
    def _trickle_reset(self) -> None:
        t = self.state.trickle
        if t.timer is not None:
            t.timer.cancel()
        self._trickle_start(t.i_min_us)

    def _trickle_start(self, interval_us: int) -> None:
        t = self.state.trickle
        now = self.scheduler.now
        t.interval_us = interval_us
        t.interval_end = now + interval_us
        t.next_fire = now + self.rng.randint(interval_us // 2, interval_us - 1)
        t.timer = self.scheduler.at(t.next_fire, self._trickle_fire)

    def _trickle_fire(self) -> None:
        t = self.state.trickle
        self.emit_dio()
        t.timer = self.scheduler.at(t.interval_end, self._trickle_next)

    def _trickle_next(self) -> None:
        t = self.state.trickle
        self._trickle_start(min(t.interval_us * 2, t.i_max_us))

    def emit_dio(self) -> None:
        self.dio_sent += 1
        self.send_dio(DioContent(self.addr, self.state.rank, self.root, self.state.preferred_parent))

    # --- DIO ---
    def on_dio(self, dio: DioContent) -> None:
        if self.is_root or dio.rank == INFINITE_RANK:
            return
        if dio.parent == self.addr:
            return
        candidate = min(INFINITE_RANK - 1, dio.rank + self.neighbors.etx(dio.sender))
        if dio.sender == self.state.preferred_parent:
            self.state.rank = candidate
            self.state.lowest_rank = min(self.state.lowest_rank, candidate)
            return
        if self.state.preferred_parent is None:
            self._adopt(dio.sender, candidate)
            return
        if dio.rank >= self.state.lowest_rank:
            return
        if candidate + self.params.hysteresis < self.state.rank:
            self._adopt(dio.sender, candidate)

    def _adopt(self, parent: int, rank: int) -> None:
        old = self.state.preferred_parent
        self.state.preferred_parent = parent
        self.state.rank = rank
        self.state.lowest_rank = min(self.state.lowest_rank, rank)
        now = self.scheduler.now
        logger.debug(f"🌳 Nodo {self.addr}: padre {old} -> {parent} (rango {rank})")
        log_trace(TraceEvent.PARENT_CHANGED, now, self.addr, {"old": old, "new": parent, "rank": rank})
        self._trickle_reset()
        if self.dao_enabled:
            if old is not None:
                self.dao_sent += 1
                self.send_dao(old, DaoContent(self.addr, self.addr, no_path=True))
            self._dao_emit(self.addr)
            if old is None:
                self._dao_timer = self.scheduler.schedule(seconds(self.params.dao_period_s), self._dao_cycle)
        if self.on_parent_change is not None:
            self.on_parent_change(old, parent)

    # --- DAO (línea base) ---
    def _dao_cycle(self) -> None:
        self._dao_emit(self.addr)
        self._dao_timer = self.scheduler.schedule(seconds(self.params.dao_period_s), self._dao_cycle)

    def _dao_emit(self, target: int) -> None:
        if self.is_root or self.state.preferred_parent is None:
            return
        self.dao_sent += 1
        self.send_dao(self.state.preferred_parent, DaoContent(self.addr, target))

    def on_dao(self, dao: DaoContent, child: int) -> None:
        now = self.scheduler.now
        if dao.no_path:
            gone = self.routes.drop_via(child)
            logger.debug(f"Nodo {self.addr}: {child} cambió de padre, rutas quitadas {gone}")
            return
        if not self.routes.add(dao.target, child, now + self.route_lifetime_us, now):
            logger.debug(f"Nodo {self.addr}: tabla de rutas llena, {dao.target} rechazado")
            log_trace(TraceEvent.ROUTE_REJECTED, now, self.addr, {"target": dao.target, "via": child})
            if self.on_route_rejected is not None:
                self.on_route_rejected(dao.target)
            return
        self._dao_emit(dao.target)

    def next_hop(self, dst: int) -> Optional[int]:
        route = self.routes.lookup(dst, self.scheduler.now)
        if route is not None:
            return route
        return self.state.preferred_parent
