"""Tabla de vecinos poblada por escucha del medio, con ETX por enlace."""
import logging
from dataclasses import dataclass
from typing import Optional

from codec import ETX_SCALE, NeighborEntry

logger = logging.getLogger(__name__)

ETX_CAP = ETX_SCALE * 16


@dataclass(slots=True)
class NeighborRecord:
    addr: int
    rssi_dbm: int
    etx_x128: int = ETX_SCALE
    last_heard: int = 0


def ewma_etx(etx_x128: int, attempts: int) -> int:
    """etx <- ceil(0.9 etx + 0.1 attempts*128), en aritmética entera."""
    value = -(-(9 * etx_x128 + attempts * ETX_SCALE) // 10)
    return max(ETX_SCALE, min(ETX_CAP, value))


class NeighborTable:
    def __init__(self, max_retries: int = 3):
        self.max_retries = max_retries
        self._records: dict[int, NeighborRecord] = {}

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, addr: int) -> bool:
        return addr in self._records

    def get(self, addr: int) -> Optional[NeighborRecord]:
        return self._records.get(addr)

    @property
    def addrs(self) -> list[int]:
        return sorted(self._records)

    def overhear(self, addr: int, rssi_dbm: int, now: int) -> tuple[NeighborRecord, bool]:
        """Inserta o actualiza el registro del transmisor. Devuelve (registro, es_nuevo)."""
        record = self._records.get(addr)
        if record is None:
            record = NeighborRecord(addr, rssi_dbm, ETX_SCALE, now)
            self._records[addr] = record
            return record, True
        record.rssi_dbm = rssi_dbm
        record.last_heard = now
        return record, False

    def etx_update(self, addr: int, attempts: Optional[int]) -> Optional[int]:
        """`attempts=None` marca una falla tras agotar los reintentos MAC."""
        record = self._records.get(addr)
        if record is None:
            return None
        if attempts is None:
            attempts = self.max_retries + 1
        record.etx_x128 = ewma_etx(record.etx_x128, attempts)
        return record.etx_x128

    def etx(self, addr: int) -> int:
        record = self._records.get(addr)
        return record.etx_x128 if record is not None else ETX_SCALE

    def purge(self, now: int, max_age_us: int) -> list[int]:
        stale = [a for a, r in self._records.items() if now - r.last_heard > max_age_us]
        for addr in stale:
            del self._records[addr]
        if stale:
            logger.debug(f"Vecinos purgados: {stale}")
        return stale

    def snapshot(self) -> list[NeighborEntry]:
        return [
            NeighborEntry(addr=r.addr, rssi_dbm=max(-128, min(127, r.rssi_dbm)), etx_x128=r.etx_x128)
            for r in sorted(self._records.values(), key=lambda r: r.addr)
        ]
