"""
Flow Table del nodo SDN: entradas con prioridad, reglas sobre ventanas de
bits de la trama, acciones secuenciales y estadísticas (contador y TTL).
"""
import bisect
import enum
import logging
import operator
from dataclasses import dataclass, field, replace
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from lowpan import BROADCAST_ADDR, Frame

logger = logging.getLogger(__name__)

PAYLOAD_WINDOW_BYTES = 16
DEFAULT_CAPACITY = 40
DEFAULT_TTL_S = 600.0


class FlowTableError(Exception):
    """Error base del motor de flujos."""


class FieldAbsent(FlowTableError):
    pass


class WindowOutOfRange(FlowTableError):
    pass


# --- Enumeraciones ---
class FieldSelector(str, enum.Enum):
    MAC_SRC = "MAC_SRC"
    MAC_DST = "MAC_DST"
    MESH_ORIG = "MESH_ORIG"
    MESH_FINAL = "MESH_FINAL"
    MESH_HOPS_LEFT = "MESH_HOPS_LEFT"
    FRAG_TAG = "FRAG_TAG"
    PAYLOAD = "PAYLOAD"


class Operator(str, enum.Enum):
    EQ = "EQ"
    NEQ = "NEQ"
    LE = "LE"
    GE = "GE"
    LT = "LT"
    GT = "GT"


class ActionType(str, enum.Enum):
    FORWARD = "FORWARD"
    BROADCAST = "BROADCAST"
    MODIFY = "MODIFY"
    DROP = "DROP"
    DECREMENT = "DECREMENT"
    INCREMENT = "INCREMENT"
    TO_UPPER_LAYER = "TO_UPPER_LAYER"
    CONTINUE = "CONTINUE"


class Disposition(str, enum.Enum):
    FORWARD = "forward"
    BROADCAST = "broadcast"
    TO_UPPER = "to_upper"
    DROPPED = "dropped"


class InstallResult(str, enum.Enum):
    INSTALLED = "installed"
    REPLACED = "replaced"
    REJECTED = "rejected"


FIELD_WIDTHS = {
    FieldSelector.MAC_SRC: 16,
    FieldSelector.MAC_DST: 16,
    FieldSelector.MESH_ORIG: 16,
    FieldSelector.MESH_FINAL: 16,
    FieldSelector.MESH_HOPS_LEFT: 4,
    FieldSelector.FRAG_TAG: 16,
    FieldSelector.PAYLOAD: 8 * PAYLOAD_WINDOW_BYTES,
}

_COMPARE = {
    Operator.EQ: operator.eq,
    Operator.NEQ: operator.ne,
    Operator.LE: operator.le,
    Operator.GE: operator.ge,
    Operator.LT: operator.lt,
    Operator.GT: operator.gt,
}

_DISPOSITIONS = {
    ActionType.FORWARD: Disposition.FORWARD,
    ActionType.BROADCAST: Disposition.BROADCAST,
    ActionType.TO_UPPER_LAYER: Disposition.TO_UPPER,
}


# --- Modelos ---
class KeyFeature(BaseModel):
    """Ventana de un campo que el nodo reporta al controlador en un table miss."""
    model_config = ConfigDict(frozen=True)

    field: FieldSelector
    offset_bits: int = Field(0, ge=0)
    size_bits: int = Field(..., ge=1, le=64)

    @model_validator(mode="after")
    def check_window(self):
        if self.offset_bits + self.size_bits > FIELD_WIDTHS[self.field]:
            raise ValueError(f"la ventana excede el ancho de {self.field.value}")
        return self


DEFAULT_KEY_FEATURES = (
    KeyFeature(field=FieldSelector.MESH_ORIG, offset_bits=0, size_bits=16),
    KeyFeature(field=FieldSelector.MESH_FINAL, offset_bits=0, size_bits=16),
)


class Rule(BaseModel):
    model_config = ConfigDict(frozen=True)

    field: FieldSelector
    offset_bits: int = Field(0, ge=0)
    size_bits: int = Field(..., ge=1, le=64)
    op: Operator = Operator.EQ
    value: int = Field(..., ge=0)

    @model_validator(mode="after")
    def check_window(self):
        if self.offset_bits + self.size_bits > FIELD_WIDTHS[self.field]:
            raise ValueError(f"la ventana excede el ancho de {self.field.value}")
        if self.value >= 1 << self.size_bits:
            raise ValueError(f"el valor {self.value} no cabe en {self.size_bits} bits")
        return self


class Action(BaseModel):
    """
    Acción de una entrada. size_bits = 0 en DECREMENT/INCREMENT significa
    "el campo completo".
    """
    model_config = ConfigDict(frozen=True)

    type: ActionType
    field: Optional[FieldSelector] = None
    value: int = Field(0, ge=0)
    offset_bits: int = Field(0, ge=0)
    size_bits: int = Field(0, ge=0, le=64)

    @model_validator(mode="after")
    def check_operands(self):
        t = self.type
        if t is ActionType.FORWARD:
            if self.value > 0xFFFF:
                raise ValueError("FORWARD requiere una dirección corta de 16 bits")
        elif t in (ActionType.MODIFY, ActionType.DECREMENT, ActionType.INCREMENT):
            if self.field is None:
                raise ValueError(f"{t.value} requiere un campo")
            if t is ActionType.MODIFY and self.size_bits == 0:
                raise ValueError("MODIFY requiere offset y tamaño")
            if t is ActionType.MODIFY and self.value >= 1 << self.size_bits:
                raise ValueError(f"el valor {self.value} no cabe en {self.size_bits} bits")
            if self.size_bits == 0 and self.offset_bits:
                raise ValueError("un offset requiere tamaño explícito")
            size = self.size_bits or FIELD_WIDTHS[self.field]
            if self.offset_bits + size > FIELD_WIDTHS[self.field]:
                raise ValueError(f"la ventana excede el ancho de {self.field.value}")
        elif self.field is not None or self.value or self.offset_bits or self.size_bits:
            raise ValueError(f"{t.value} no admite operandos")
        return self


class FlowEntry(BaseModel):
    priority: int = Field(..., ge=0, description="Menor número, antes se examina")
    rules: tuple[Rule, ...] = ()
    actions: tuple[Action, ...] = Field(..., min_length=1)
    stats_counter: int = Field(0, ge=0)
    ttl_s: float = Field(DEFAULT_TTL_S, ge=0)
    timeout_s: Optional[float] = Field(None, description="TTL instalado; se restaura en cada acierto")
    installed_at: int = 0

    @model_validator(mode="after")
    def default_timeout(self):
        if self.timeout_s is None:
            self.timeout_s = self.ttl_s
        return self

    @property
    def key(self) -> tuple:
        return (self.priority, self.rules)


# --- Ventanas de bits ---
def _field_value(f: Frame, sel: FieldSelector) -> tuple[int, int]:
    if sel is FieldSelector.MAC_SRC:
        return 16, f.mac_src
    if sel is FieldSelector.MAC_DST:
        return 16, f.mac_dst
    if sel is FieldSelector.PAYLOAD:
        if not f.payload_window:
            raise FieldAbsent("la trama no tiene ventana de payload")
        return 8 * len(f.payload_window), int.from_bytes(f.payload_window, "big")
    if sel is FieldSelector.FRAG_TAG:
        if f.frag is None:
            raise FieldAbsent("la trama no tiene cabecera de fragmentación")
        return 16, f.frag.tag
    if f.mesh is None:
        raise FieldAbsent("la trama no tiene cabecera mesh")
    if sel is FieldSelector.MESH_ORIG:
        return 16, f.mesh.originator
    if sel is FieldSelector.MESH_FINAL:
        return 16, f.mesh.final
    return 4, f.mesh.hops_left


def extract_window(f: Frame, field: FieldSelector, offset_bits: int, size_bits: int) -> int:
    width, raw = _field_value(f, field)
    if offset_bits < 0 or size_bits < 1 or size_bits > 64 or offset_bits + size_bits > width:
        if field is FieldSelector.PAYLOAD and offset_bits + size_bits <= FIELD_WIDTHS[field]:
            raise FieldAbsent("la ventana supera los bytes disponibles")
        raise WindowOutOfRange(f"ventana {offset_bits}+{size_bits} fuera de {field.value} ({width} bits)")
    return (raw >> (width - offset_bits - size_bits)) & ((1 << size_bits) - 1)


def write_window(f: Frame, field: FieldSelector, offset_bits: int, size_bits: int, value: int) -> Frame:
    """Devuelve una copia de la trama con la ventana reemplazada por `value`."""
    width, raw = _field_value(f, field)
    if offset_bits + size_bits > width:
        raise WindowOutOfRange(f"ventana {offset_bits}+{size_bits} fuera de {field.value}")
    shift = width - offset_bits - size_bits
    mask = ((1 << size_bits) - 1) << shift
    new = (raw & ~mask) | ((value << shift) & mask)

    if field is FieldSelector.MAC_SRC:
        return replace(f, mac_src=new)
    if field is FieldSelector.MAC_DST:
        return replace(f, mac_dst=new)
    if field is FieldSelector.PAYLOAD:
        return replace(f, payload_window=new.to_bytes(len(f.payload_window), "big"))
    if field is FieldSelector.FRAG_TAG:
        return replace(f, frag=replace(f.frag, tag=new))
    if field is FieldSelector.MESH_ORIG:
        return replace(f, mesh=replace(f.mesh, originator=new))
    if field is FieldSelector.MESH_FINAL:
        return replace(f, mesh=replace(f.mesh, final=new))
    return replace(f, mesh=replace(f.mesh, hops_left=new))


def entry_matches(f: Frame, e: FlowEntry) -> bool:
    for rule in e.rules:
        try:
            current = extract_window(f, rule.field, rule.offset_bits, rule.size_bits)
        except FlowTableError:
            return False
        if not _COMPARE[rule.op](current, rule.value):
            return False
    return True


# --- Resultado de búsqueda y ejecución ---
@dataclass
class MatchOutcome:
    plan: list = field(default_factory=list)
    matched: list = field(default_factory=list)

    @property
    def is_miss(self) -> bool:
        return not self.matched


@dataclass
class ActionResult:
    disposition: Disposition
    frame: Frame
    next_hop: Optional[int] = None
    diagnostics: list = field(default_factory=list)


def apply_actions(f: Frame, plan: list) -> ActionResult:
    """
    Ejecuta el plan en orden. DROP corta la ejecución; la última acción de
    destino (FORWARD, BROADCAST, TO_UPPER_LAYER) define la disposición.
    """
    disposition: Optional[Disposition] = None
    next_hop: Optional[int] = None
    diagnostics: list[str] = []

    for action in plan:
        t = action.type
        if t is ActionType.DROP:
            return ActionResult(Disposition.DROPPED, f, None, diagnostics)
        if t is ActionType.CONTINUE:
            continue
        if t in _DISPOSITIONS:
            disposition = _DISPOSITIONS[t]
            next_hop = action.value if t is ActionType.FORWARD else (BROADCAST_ADDR if t is ActionType.BROADCAST else None)
            continue

        size = action.size_bits or FIELD_WIDTHS[action.field]
        try:
            if t is ActionType.MODIFY:
                f = write_window(f, action.field, action.offset_bits, size, action.value)
            else:
                current = extract_window(f, action.field, action.offset_bits, size)
                if t is ActionType.DECREMENT:
                    updated = max(0, current - action.value)
                else:
                    updated = min((1 << size) - 1, current + action.value)
                f = write_window(f, action.field, action.offset_bits, size, updated)
        except FlowTableError as exc:
            diagnostics.append("field_absent")
            logger.debug(f"Acción {t.value} omitida: {exc}")

    if disposition is None:
        diagnostics.append("no_disposition")
        return ActionResult(Disposition.DROPPED, f, None, diagnostics)
    return ActionResult(disposition, f, next_hop, diagnostics)


class FlowTable:
    """
    Tabla ordenada por (prioridad, instante de instalación). El TTL de una
    entrada se restaura cada vez que una trama la usa.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        self.capacity = capacity
        self._entries: list[FlowEntry] = []

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(list(self._entries))

    @property
    def entries(self) -> list[FlowEntry]:
        return list(self._entries)

    def clear(self) -> None:
        self._entries.clear()

    def find(self, priority: int, rules: tuple) -> Optional[FlowEntry]:
        for e in self._entries:
            if e.priority == priority and e.rules == rules:
                return e
        return None

    def lookup(self, f: Frame) -> MatchOutcome:
        outcome = MatchOutcome()
        for e in self._entries:
            if not entry_matches(f, e):
                continue
            e.stats_counter += 1
            e.ttl_s = e.timeout_s
            outcome.matched.append(e)
            outcome.plan.extend(e.actions)
            if e.actions[-1].type is not ActionType.CONTINUE:
                break
        return outcome

    def install(self, e: FlowEntry, now: int = 0) -> InstallResult:
        current = self.find(e.priority, e.rules)
        if current is not None:
            current.actions = e.actions
            current.ttl_s = e.ttl_s
            current.timeout_s = e.timeout_s
            return InstallResult.REPLACED

        if len(self._entries) >= self.capacity:
            victim = min(self._entries, key=lambda x: x.ttl_s)
            if victim.ttl_s > 0:
                return InstallResult.REJECTED
            self._entries.remove(victim)

        e.installed_at = now
        bisect.insort(self._entries, e, key=lambda x: (x.priority, x.installed_at))
        return InstallResult.INSTALLED

    def tick(self, dt_s: float) -> list[FlowEntry]:
        expired = []
        for e in self._entries:
            e.ttl_s = max(0.0, e.ttl_s - dt_s)
            if e.ttl_s <= 1e-9:
                e.ttl_s = 0.0
                expired.append(e)
        if expired:
            self._entries = [e for e in self._entries if e.ttl_s > 0]
        return expired


# --- Entradas de reenvío mesh-under ---
PRIORITY_ONE_HOP = 20
PRIORITY_CONTROLLER = 50
PRIORITY_UPSTREAM = 250


def forwarding_entry(priority: int, next_hop: int, ttl_s: float, final: Optional[int] = None) -> FlowEntry:
    """[DECREMENT hops_left 1, FORWARD next_hop] sobre MESH_FINAL == final (o sin reglas)."""
    rules = ()
    if final is not None:
        rules = (Rule(field=FieldSelector.MESH_FINAL, size_bits=16, op=Operator.EQ, value=final),)
    return FlowEntry(
        priority=priority,
        rules=rules,
        actions=(
            Action(type=ActionType.DECREMENT, field=FieldSelector.MESH_HOPS_LEFT, value=1),
            Action(type=ActionType.FORWARD, value=next_hop),
        ),
        ttl_s=ttl_s,
    )
