"""
Métricas de una réplica: overhead de control por categoría y ventana,
muestras de RTT, diagnósticos de descarte y contadores de conservación.
"""
import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from models import CONTROL_CATEGORIES, ControlCategory, StackMode, Window
from sim.channel import Outcome
from trace_logger import TraceEvent, log_trace

logger = logging.getLogger(__name__)

CONTROL_HEADER = ["replica", "seed", "mode", "window", "category", "count", "bytes"]
RTT_HEADER = [
    "replica", "mode", "send_time_us", "rtt_us", "src", "dst",
    "hops_fwd", "hops_back", "path_fwd", "path_back", "window",
]
DIAGNOSTICS_HEADER = ["replica", "seed", "mode", "window", "cause", "count"]


@dataclass(frozen=True)
class RttSample:
    send_time_us: int
    rtt_us: int
    src: int
    dst: int
    path_fwd: tuple[int, ...] = ()
    path_back: tuple[int, ...] = ()

    @property
    def hops_fwd(self) -> int:
        return max(0, len(self.path_fwd) - 1)

    @property
    def hops_back(self) -> int:
        return max(0, len(self.path_back) - 1)


def _join(path: Iterable[int]) -> str:
    return "-".join(str(n) for n in path)


@dataclass
class Metrics:
    replica: int
    seed: int
    mode: StackMode
    warmup_us: int
    control: Counter = field(default_factory=Counter)
    control_bytes: Counter = field(default_factory=Counter)
    diagnostics: Counter = field(default_factory=Counter)
    receptions: Counter = field(default_factory=Counter)
    rtt: list = field(default_factory=list)
    frames_tx: int = 0
    bytes_tx: int = 0
    reception_attempts: int = 0
    dao_datagrams: int = 0
    table_miss_requests: Counter = field(default_factory=Counter)
    last_miss_us: Optional[int] = None
    routes_rejected: int = 0
    echo_sent: int = 0
    graph_snapshot: Optional[dict] = None

    def window(self, t_us: int) -> Window:
        return Window.STEADY if t_us >= self.warmup_us else Window.WARMUP

    # --- Registro ---
    def record_frame(self, now: int, frame, on_air: int) -> None:
        datagram = getattr(frame, "datagram", None)
        category = getattr(datagram, "category", None) or ControlCategory.DATA
        key = (self.window(now), ControlCategory(category))
        self.control[key] += 1
        self.control_bytes[key] += on_air
        self.frames_tx += 1
        self.bytes_tx += on_air

    def record_reception(self, outcome: Outcome) -> None:
        self.receptions[outcome] += 1
        self.reception_attempts += 1

    def record_diagnostic(self, now: int, node: int, cause: str, **details) -> None:
        self.diagnostics[(self.window(now), cause)] += 1
        log_trace(TraceEvent.FRAME_DROPPED, now, node, {"cause": cause, **details})

    def record_table_miss(self, now: int, node: int, key) -> None:
        self.table_miss_requests[self.window(now)] += 1
        self.last_miss_us = now
        log_trace(TraceEvent.TABLE_MISS, now, node, {"key": list(key)})

    def record_rtt(self, sample: RttSample) -> None:
        self.rtt.append(sample)

    # --- Consultas ---
    def steady_control_bytes(self) -> int:
        return sum(self.control_bytes[(Window.STEADY, c)] for c in CONTROL_CATEGORIES)

    def steady_control_count(self) -> int:
        return sum(self.control[(Window.STEADY, c)] for c in CONTROL_CATEGORIES)

    def steady_rtt(self) -> list[RttSample]:
        return [s for s in self.rtt if self.window(s.send_time_us) is Window.STEADY]

    def diagnostic_total(self, cause: str) -> int:
        return sum(n for (_, c), n in self.diagnostics.items() if c == cause)

    # --- Filas CSV ---
    def control_rows(self) -> list[list]:
        rows = []
        for window in Window:
            for category in ControlCategory:
                key = (window, category)
                rows.append([self.replica, self.seed, self.mode.value, window.value, category.value,
                             self.control[key], self.control_bytes[key]])
        return rows

    def rtt_rows(self) -> list[list]:
        return [
            [self.replica, self.mode.value, s.send_time_us, s.rtt_us, s.src, s.dst, s.hops_fwd, s.hops_back,
             _join(s.path_fwd), _join(s.path_back), self.window(s.send_time_us).value]
            for s in self.rtt
        ]

    def diagnostic_rows(self) -> list[list]:
        return [
            [self.replica, self.seed, self.mode.value, window.value, cause, n]
            for (window, cause), n in sorted(self.diagnostics.items(), key=lambda kv: (kv[0][0].value, kv[0][1]))
        ]


def write_csv(path: Path, header: list[str], rows: Iterable[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)
