import logging
import json
from enum import Enum

from config import settings

# Logger específico para la traza de eventos de la simulación
trace_log = logging.getLogger("trace")

if not trace_log.handlers:
    trace_log.addHandler(logging.StreamHandler())
    trace_log.setLevel(logging.INFO if settings.TRACE else logging.WARNING)
    trace_log.propagate = False

class TraceEvent(str, Enum):
    TABLE_MISS = "TABLE_MISS"
    FLOW_INSTALLED = "FLOW_INSTALLED"
    FLOW_REJECTED = "FLOW_REJECTED"
    FRAME_DROPPED = "FRAME_DROPPED"
    PARENT_CHANGED = "PARENT_CHANGED"
    TOPOLOGY_MERGED = "TOPOLOGY_MERGED"
    PATH_COMPUTED = "PATH_COMPUTED"
    EXCHANGE_TIMEOUT = "EXCHANGE_TIMEOUT"
    ROUTE_REJECTED = "ROUTE_REJECTED"

def log_trace(event: TraceEvent, now_us: int, node: int, details: dict):
    """
    Registra un evento de la simulación en formato JSON.
    El tiempo es el simulado, en microsegundos; nunca el del reloj de pared.
    """
    if not trace_log.isEnabledFor(logging.INFO):
        return

    log_data = {
        "event": event.value,
        "t_us": now_us,
        "node": node,
        "details": details
    }

    trace_log.info(json.dumps(log_data, ensure_ascii=False, default=str))
