"""
Subcapa de mensajes CoAP simplificada para el SBI: intercambio confirmable
con stop-and-wait, detección de duplicados y despacho de recursos.

Las respuestas viajan siempre piggybacked en el ACK del CON que responden.
Los recursos se declaran con un ResourceRouter por módulo y el endpoint los
monta con include_router(router, prefix=...).
"""
import enum
import itertools
import logging
import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from codec import MalformedPayload
from models import ControlCategory
from trace_logger import TraceEvent, log_trace

logger = logging.getLogger(__name__)

COAP_VERSION = 1
ACK_TIMEOUT_S = 2.0
MAX_RETRANSMIT = 4
EXCHANGE_LIFETIME_US = 247_000_000
NON_LIFETIME_US = 145_000_000
URI_PATH_OPTION = 11
PAYLOAD_MARKER = 0xFF


class MessageType(str, enum.Enum):
    CON = "CON"
    NON = "NON"
    ACK = "ACK"
    RST = "RST"


_TYPE_BITS = {MessageType.CON: 0, MessageType.NON: 1, MessageType.ACK: 2, MessageType.RST: 3}


class Code(enum.IntEnum):
    EMPTY = 0x00
    GET = 0x01
    POST = 0x02
    PUT = 0x03
    DELETE = 0x04
    DELETED = 0x42
    CHANGED = 0x44
    CONTENT = 0x45
    NOT_FOUND = 0x84
    INTERNAL_ERROR = 0xA0

    @property
    def is_request(self) -> bool:
        return 0x01 <= self <= 0x1F

    @property
    def is_success(self) -> bool:
        return self >> 5 == 2

    @property
    def dotted(self) -> str:
        return f"{self >> 5}.{self & 0x1F:02d}"


class SbiException(Exception):
    """Error que un recurso devuelve como código de respuesta."""

    def __init__(self, code: Code, detail: str = ""):
        super().__init__(f"{code.dotted} {detail}".strip())
        self.code = code
        self.detail = detail


class TransmissionTimeout(Exception):
    pass


def _option_length(n: int) -> bytes:
    if n < 13:
        return b""
    if n < 269:
        return bytes([n - 13])
    return struct.pack(">H", n - 269)


def _nibble(n: int) -> int:
    return n if n < 13 else (13 if n < 269 else 14)


@dataclass(frozen=True, slots=True)
class SbiMessage:
    type: MessageType
    code: Code
    message_id: int
    token: bytes = b""
    uri_path: tuple[str, ...] = ()
    payload: bytes = b""

    def __post_init__(self):
        if not 0 <= self.message_id <= 0xFFFF:
            raise ValueError(f"message_id fuera de rango: {self.message_id}")
        if len(self.token) > 8:
            raise ValueError("el token admite hasta 8 bytes")

    @property
    def path(self) -> str:
        return "/".join(self.uri_path)

    def to_bytes(self) -> bytes:
        first = (COAP_VERSION << 6) | (_TYPE_BITS[self.type] << 4) | len(self.token)
        out = bytearray(struct.pack(">BBH", first, int(self.code), self.message_id))
        out += self.token
        previous = 0
        for segment in self.uri_path:
            value = segment.encode()
            delta = URI_PATH_OPTION - previous
            previous = URI_PATH_OPTION
            out.append((_nibble(delta) << 4) | _nibble(len(value)))
            out += _option_length(delta) + _option_length(len(value)) + value
        if self.payload:
            out.append(PAYLOAD_MARKER)
            out += self.payload
        return bytes(out)

    def encoded_size(self) -> int:
        return len(self.to_bytes())


def classify(path: str, code: Code, response: bool = False) -> ControlCategory:
    """Categoría de overhead de un mensaje SBI (las respuestas heredan la del pedido)."""
    root = path.strip("/").split("/")[0]
    if root == "network":
        return ControlCategory.TOPOLOGY_UPDATE
    if root == "flow-engine" and code is Code.POST:
        return ControlCategory.TABLE_MISS_RESP if response else ControlCategory.TABLE_MISS_REQ
    if root == "flow-table" and code is Code.PUT:
        return ControlCategory.FLOW_PUT
    return ControlCategory.OTHER_SBI


# --- Recursos ---
@dataclass
class SbiRequest:
    src: int
    message: SbiMessage
    endpoint: "SbiEndpoint"

    @property
    def payload(self) -> bytes:
        return self.message.payload

    @property
    def owner(self) -> Any:
        return self.endpoint.owner


@dataclass(frozen=True)
class SbiResponse:
    code: Code
    payload: bytes = b""


Handler = Callable[[SbiRequest], SbiResponse]


class ResourceRouter:
    def __init__(self):
        self.routes: dict[tuple[str, Code], Handler] = {}

    def _route(self, code: Code, path: str):
        def decorator(fn: Handler) -> Handler:
            self.routes[(path.strip("/"), code)] = fn
            return fn
        return decorator

    def get(self, path: str = ""):
        return self._route(Code.GET, path)

    def post(self, path: str = ""):
        return self._route(Code.POST, path)

    def put(self, path: str = ""):
        return self._route(Code.PUT, path)

    def delete(self, path: str = ""):
        return self._route(Code.DELETE, path)


# --- Intercambios ---
class DedupResult(str, enum.Enum):
    FRESH = "fresh"
    DUPLICATE = "duplicate"


@dataclass
class RetxState:
    message: SbiMessage
    dst: int
    category: ControlCategory
    timeout_s: float = ACK_TIMEOUT_S
    retries_left: int = MAX_RETRANSMIT
    attempts: int = 1
    started_at: int = 0
    timer: Any = None
    on_response: Optional[Callable[[SbiResponse], None]] = None
    on_timeout: Optional[Callable[[TransmissionTimeout], None]] = None


@dataclass
class _Seen:
    expires_at: int
    response: Optional[SbiMessage] = None
    category: Optional[ControlCategory] = None


@dataclass
class EndpointStats:
    sent: int = 0
    retransmissions: int = 0
    timeouts: int = 0
    duplicates: int = 0
    handled: int = 0


class SbiEndpoint:
    """
    Extremo SBI de un nodo o del controlador. `send(dst, msg, category)` es el
    transporte que provee el dueño; los temporizadores se agendan en el
    scheduler de la simulación.
    """

    def __init__(self, owner: Any, addr: int, scheduler, send: Callable[[int, SbiMessage, ControlCategory], None]):
        self.owner = owner
        self.addr = addr
        self.scheduler = scheduler
        self._send = send
        self._routes: dict[tuple[str, Code], Handler] = {}
        self._mids = itertools.count(1)
        self._tokens = itertools.count(1)
        self._pending: dict[bytes, RetxState] = {}
        self._seen: dict[tuple[int, int], _Seen] = {}
        self.stats = EndpointStats()

    def include_router(self, router: ResourceRouter, prefix: str = "") -> None:
        base = prefix.strip("/")
        for (path, code), handler in router.routes.items():
            full = "/".join(p for p in (base, path) if p)
            self._routes[(full, code)] = handler

    @property
    def pending(self) -> int:
        return len(self._pending)

    def _next_mid(self) -> int:
        return next(self._mids) & 0xFFFF

    # --- Cliente ---
    def request(
        self,
        dst: int,
        code: Code,
        path: str,
        payload: bytes = b"",
        on_response: Optional[Callable[[SbiResponse], None]] = None,
        on_timeout: Optional[Callable[[TransmissionTimeout], None]] = None,
        confirmable: bool = True,
    ) -> SbiMessage:
        token = struct.pack(">H", next(self._tokens) & 0xFFFF)
        msg = SbiMessage(
            type=MessageType.CON if confirmable else MessageType.NON,
            code=code,
            message_id=self._next_mid(),
            token=token,
            uri_path=tuple(s for s in path.strip("/").split("/") if s),
            payload=payload,
        )
        category = classify(path, code)
        state = RetxState(
            message=msg,
            dst=dst,
            category=category,
            started_at=self.scheduler.now,
            on_response=on_response,
            on_timeout=on_timeout,
        )
        self._pending[token] = state
        self.stats.sent += 1
        self._send(dst, msg, category)
        if confirmable:
            state.timer = self.scheduler.schedule(int(state.timeout_s * 1_000_000), lambda: self._expire(token))
        else:
            # NON: sin retransmisiones, la espera de respuesta vence tras NON_LIFETIME
            state.retries_left = 0
            state.timer = self.scheduler.schedule(NON_LIFETIME_US, lambda: self._expire(token))
        return msg

    def _expire(self, token: bytes) -> None:
        state = self._pending.get(token)
        if state is None:
            return
        if state.retries_left > 0:
            state.retries_left -= 1
            state.attempts += 1
            state.timeout_s *= 2
            self.stats.retransmissions += 1
            self._send(state.dst, state.message, state.category)
            state.timer = self.scheduler.schedule(int(state.timeout_s * 1_000_000), lambda: self._expire(token))
            return

        del self._pending[token]
        self.stats.timeouts += 1
        elapsed = self.scheduler.now - state.started_at
        logger.debug(f"⏱️ {self.addr:#06x}: sin respuesta de {state.dst:#06x} para /{state.message.path} tras {state.attempts} intentos")
        log_trace(TraceEvent.EXCHANGE_TIMEOUT, self.scheduler.now, self.addr, {
            "dst": state.dst, "path": state.message.path, "attempts": state.attempts, "elapsed_us": elapsed,
        })
        if state.on_timeout is not None:
            state.on_timeout(TransmissionTimeout(f"/{state.message.path} hacia {state.dst:#06x} tras {state.attempts} intentos"))

    # --- Servidor ---
    def dedup_filter(self, src: int, message_id: int, now: int) -> DedupResult:
        key = (src, message_id)
        seen = self._seen.get(key)
        if seen is not None and seen.expires_at > now:
            return DedupResult.DUPLICATE
        if len(self._seen) > 256:
            self._seen = {k: v for k, v in self._seen.items() if v.expires_at > now}
        self._seen[key] = _Seen(expires_at=now + EXCHANGE_LIFETIME_US)
        return DedupResult.FRESH

    def dispatch(self, src: int, msg: SbiMessage) -> SbiResponse:
        handler = self._routes.get((msg.path, msg.code))
        if handler is None:
            return SbiResponse(Code.NOT_FOUND)
        self.stats.handled += 1
        try:
            return handler(SbiRequest(src=src, message=msg, endpoint=self))
        except SbiException as exc:
            logger.debug(f"Recurso /{msg.path} respondió {exc.code.dotted}: {exc.detail}")
            return SbiResponse(exc.code)
        except MalformedPayload as exc:
            logger.debug(f"Carga inválida en /{msg.path} desde {src:#06x}: {exc}")
            return SbiResponse(Code.INTERNAL_ERROR)

    def receive(self, src: int, msg: SbiMessage) -> None:
        if msg.type in (MessageType.ACK, MessageType.RST) or not msg.code.is_request:
            self._on_response(src, msg)
            return

        now = self.scheduler.now
        if self.dedup_filter(src, msg.message_id, now) is DedupResult.DUPLICATE:
            self.stats.duplicates += 1
            seen = self._seen[(src, msg.message_id)]
            if seen.response is not None:
                self._send(src, seen.response, seen.category)
            return

        result = self.dispatch(src, msg)
        reply = SbiMessage(
            type=MessageType.ACK if msg.type is MessageType.CON else MessageType.NON,
            code=result.code,
            message_id=msg.message_id if msg.type is MessageType.CON else self._next_mid(),
            token=msg.token,
            payload=result.payload,
        )
        category = classify(msg.path, msg.code, response=True)
        seen = self._seen[(src, msg.message_id)]
        seen.response = reply
        seen.category = category
        self._send(src, reply, category)

    def _on_response(self, src: int, msg: SbiMessage) -> None:
        state = self._pending.get(msg.token)
        if state is None or state.dst != src:
            return
        if msg.type is MessageType.ACK and msg.message_id != state.message.message_id:
            return
        del self._pending[msg.token]
        if state.timer is not None:
            state.timer.cancel()
        if msg.type is MessageType.RST:
            if state.on_timeout is not None:
                state.on_timeout(TransmissionTimeout(f"RST de {src:#06x} para /{state.message.path}"))
            return
        if state.on_response is not None:
            state.on_response(SbiResponse(msg.code, msg.payload))
