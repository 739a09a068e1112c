"""
Esquemas de carga del SBI serializados en CBOR canónico (longitudes
definidas, enteros en su forma más corta, claves de mapa ordenadas).

La decodificación es estricta: cualquier byte que no reproduzca exactamente
la misma codificación al re-serializarse se rechaza como MalformedPayload.
"""
import math
from typing import Any, Optional

import cbor2
from pydantic import BaseModel, Field, ValidationError, model_validator

from flow_table import Action, ActionType, FieldSelector, FlowEntry, KeyFeature, Operator, Rule

ETX_SCALE = 128

FIELD_CODES = {
    FieldSelector.MAC_SRC: 1,
    FieldSelector.MAC_DST: 2,
    FieldSelector.MESH_ORIG: 3,
    FieldSelector.MESH_FINAL: 4,
    FieldSelector.MESH_HOPS_LEFT: 5,
    FieldSelector.FRAG_TAG: 6,
    FieldSelector.PAYLOAD: 7,
}
OPERATOR_CODES = {
    Operator.EQ: 0,
    Operator.NEQ: 1,
    Operator.LE: 2,
    Operator.GE: 3,
    Operator.LT: 4,
    Operator.GT: 5,
}
ACTION_CODES = {
    ActionType.FORWARD: 0,
    ActionType.BROADCAST: 1,
    ActionType.MODIFY: 2,
    ActionType.DROP: 3,
    ActionType.DECREMENT: 4,
    ActionType.INCREMENT: 5,
    ActionType.TO_UPPER_LAYER: 6,
    ActionType.CONTINUE: 7,
}
_FIELDS = {v: k for k, v in FIELD_CODES.items()}
_OPERATORS = {v: k for k, v in OPERATOR_CODES.items()}
_ACTIONS = {v: k for k, v in ACTION_CODES.items()}

# Claves del mapa de configuración de la respuesta a POST /network
SETTING_UPDATE_PERIOD = 1
SETTING_KEY_FEATURES = 2
SETTING_DEFAULT_TTL = 3


class MalformedPayload(Exception):
    """La carga no respeta su esquema CBOR."""


# --- Esquemas ---
class NeighborEntry(BaseModel):
    addr: int = Field(..., ge=0, le=0xFFFF)
    rssi_dbm: int = Field(..., ge=-128, le=127)
    etx_x128: int = Field(ETX_SCALE, ge=ETX_SCALE)


class TopologyReport(BaseModel):
    node_addr: int = Field(..., ge=0, le=0xFFFF)
    battery_level: int = Field(100, ge=0, le=255)
    update_period_s: int = Field(..., ge=1)
    neighbors: list[NeighborEntry] = []


class TableMissReport(BaseModel):
    node_addr: int = Field(..., ge=0, le=0xFFFF)
    key_values: Optional[list[int]] = None
    frame_bytes: Optional[bytes] = None

    @model_validator(mode="after")
    def one_variant(self):
        if (self.key_values is None) == (self.frame_bytes is None):
            raise ValueError("el reporte lleva valores clave o la trama completa, no ambos")
        return self


class NodeSettings(BaseModel):
    """Parámetros de configuración que el controlador envía en la primera respuesta."""
    update_period_s: Optional[int] = Field(None, ge=1)
    key_features: Optional[list[KeyFeature]] = None
    default_ttl_s: Optional[int] = Field(None, ge=0)


def etx_to_fixed(etx: float) -> int:
    return int(round(etx * ETX_SCALE))


def fixed_to_etx(value: int) -> float:
    return value / ETX_SCALE


# --- Primitivas ---
def _dumps(obj: Any) -> bytes:
    return cbor2.dumps(obj, canonical=True)


def _loads(raw: bytes) -> Any:
    try:
        obj = cbor2.loads(raw)
    except Exception as exc:
        raise MalformedPayload(f"CBOR inválido: {exc}") from exc
    try:
        canonical = _dumps(obj)
    except Exception as exc:
        raise MalformedPayload(f"valor CBOR no representable: {exc}") from exc
    if canonical != raw:
        raise MalformedPayload("codificación no canónica o con bytes sobrantes")
    return obj


def _uint(value: Any) -> int:
    if type(value) is not int or value < 0:
        raise MalformedPayload(f"se esperaba un entero sin signo, llegó {value!r}")
    return value


def _int(value: Any) -> int:
    if type(value) is not int:
        raise MalformedPayload(f"se esperaba un entero, llegó {value!r}")
    return value


def _array(value: Any, sizes: Optional[tuple] = None) -> list:
    if type(value) is not list:
        raise MalformedPayload(f"se esperaba un arreglo, llegó {type(value).__name__}")
    if sizes is not None and len(value) not in sizes:
        raise MalformedPayload(f"arreglo de {len(value)} elementos, se esperaban {sizes}")
    return value


def _lookup(table: dict, code: Any, what: str):
    try:
        return table[_uint(code)]
    except KeyError:
        raise MalformedPayload(f"código de {what} desconocido: {code}") from None


def _validated(build):
    try:
        return build()
    except ValidationError as exc:
        raise MalformedPayload(f"fuera de esquema: {exc.errors()[0]['msg']}") from exc


# --- FlowEntrySet ---
def _rule_to_wire(r: Rule) -> list:
    return [FIELD_CODES[r.field], r.offset_bits, r.size_bits, OPERATOR_CODES[r.op], r.value]


def _action_to_wire(a: Action) -> list:
    code = ACTION_CODES[a.type]
    if a.type is ActionType.FORWARD:
        return [code, a.value]
    if a.type is ActionType.MODIFY:
        return [code, FIELD_CODES[a.field], a.value, a.offset_bits, a.size_bits]
    if a.type in (ActionType.DECREMENT, ActionType.INCREMENT):
        if a.size_bits:
            return [code, FIELD_CODES[a.field], a.value, a.offset_bits, a.size_bits]
        return [code, FIELD_CODES[a.field], a.value]
    return [code]


def _rule_from_wire(item: Any) -> Rule:
    field, offset, size, op, value = _array(item, (5,))
    return _validated(lambda: Rule(
        field=_lookup(_FIELDS, field, "campo"),
        offset_bits=_uint(offset),
        size_bits=_uint(size),
        op=_lookup(_OPERATORS, op, "operador"),
        value=_uint(value),
    ))


def _action_from_wire(item: Any) -> Action:
    item = _array(item, (1, 2, 3, 5))
    atype = _lookup(_ACTIONS, item[0], "acción")
    if atype is ActionType.FORWARD:
        _array(item, (2,))
        return _validated(lambda: Action(type=atype, value=_uint(item[1])))
    if atype in (ActionType.MODIFY, ActionType.DECREMENT, ActionType.INCREMENT):
        _array(item, (5,) if atype is ActionType.MODIFY else (3, 5))
        offset, size = (_uint(item[3]), _uint(item[4])) if len(item) == 5 else (0, 0)
        if atype is not ActionType.MODIFY and len(item) == 5 and size == 0:
            raise MalformedPayload("forma extendida con tamaño 0")
        return _validated(lambda: Action(
            type=atype,
            field=_lookup(_FIELDS, item[1], "campo"),
            value=_uint(item[2]),
            offset_bits=offset,
            size_bits=size,
        ))
    _array(item, (1,))
    return _validated(lambda: Action(type=atype))


def encode_flow_entries(entries: list[FlowEntry]) -> bytes:
    return _dumps([
        [
            e.priority,
            [_rule_to_wire(r) for r in e.rules],
            [_action_to_wire(a) for a in e.actions],
            int(math.ceil(e.ttl_s)),
        ]
        for e in entries
    ])


def decode_flow_entries(raw: bytes) -> list[FlowEntry]:
    entries = []
    for item in _array(_loads(raw)):
        priority, rules, actions, ttl = _array(item, (4,))
        rules = tuple(_rule_from_wire(r) for r in _array(rules))
        actions = tuple(_action_from_wire(a) for a in _array(actions))
        entries.append(_validated(lambda: FlowEntry(
            priority=_uint(priority), rules=rules, actions=actions, ttl_s=_uint(ttl)
        )))
    return entries


# --- TopologyReport ---
def encode_topology_report(report: TopologyReport) -> bytes:
    return _dumps([
        report.node_addr,
        report.battery_level,
        report.update_period_s,
        [[n.addr, n.rssi_dbm, n.etx_x128] for n in report.neighbors],
    ])


def decode_topology_report(raw: bytes) -> TopologyReport:
    node, battery, period, neighbors = _array(_loads(raw), (4,))
    parsed = []
    for item in _array(neighbors):
        addr, rssi, etx = _array(item, (3,))
        parsed.append(_validated(lambda: NeighborEntry(addr=_uint(addr), rssi_dbm=_int(rssi), etx_x128=_uint(etx))))
    return _validated(lambda: TopologyReport(
        node_addr=_uint(node), battery_level=_uint(battery), update_period_s=_uint(period), neighbors=parsed
    ))


# --- TableMissReport ---
def encode_table_miss(report: TableMissReport) -> bytes:
    body = report.frame_bytes if report.frame_bytes is not None else list(report.key_values)
    return _dumps([report.node_addr, body])


def decode_table_miss(raw: bytes) -> TableMissReport:
    node, body = _array(_loads(raw), (2,))
    if type(body) is bytes:
        return _validated(lambda: TableMissReport(node_addr=_uint(node), frame_bytes=body))
    values = [_uint(v) for v in _array(body)]
    return _validated(lambda: TableMissReport(node_addr=_uint(node), key_values=values))


# --- KeyFeatureSpec ---
def _key_features_to_wire(features: list[KeyFeature]) -> list:
    return [[FIELD_CODES[k.field], k.offset_bits, k.size_bits] for k in features]


def _key_features_from_wire(obj: Any) -> list[KeyFeature]:
    out = []
    for item in _array(obj):
        field, offset, size = _array(item, (3,))
        out.append(_validated(lambda: KeyFeature(
            field=_lookup(_FIELDS, field, "campo"), offset_bits=_uint(offset), size_bits=_uint(size)
        )))
    return out


def encode_key_features(features: list[KeyFeature]) -> bytes:
    return _dumps(_key_features_to_wire(features))


def decode_key_features(raw: bytes) -> list[KeyFeature]:
    return _key_features_from_wire(_loads(raw))


# --- Configuración (respuesta a POST /network) ---
def encode_node_settings(settings: NodeSettings) -> bytes:
    body = {}
    if settings.update_period_s is not None:
        body[SETTING_UPDATE_PERIOD] = settings.update_period_s
    if settings.key_features is not None:
        body[SETTING_KEY_FEATURES] = _key_features_to_wire(settings.key_features)
    if settings.default_ttl_s is not None:
        body[SETTING_DEFAULT_TTL] = settings.default_ttl_s
    return _dumps(body)


def decode_node_settings(raw: bytes) -> NodeSettings:
    body = _loads(raw)
    if type(body) is not dict:
        raise MalformedPayload("se esperaba un mapa de configuración")
    unknown = set(body) - {SETTING_UPDATE_PERIOD, SETTING_KEY_FEATURES, SETTING_DEFAULT_TTL}
    if unknown:
        raise MalformedPayload(f"claves de configuración desconocidas: {sorted(unknown, key=str)}")
    period = body.get(SETTING_UPDATE_PERIOD)
    features = body.get(SETTING_KEY_FEATURES)
    ttl = body.get(SETTING_DEFAULT_TTL)
    return _validated(lambda: NodeSettings(
        update_period_s=_uint(period) if period is not None else None,
        key_features=_key_features_from_wire(features) if features is not None else None,
        default_ttl_s=_uint(ttl) if ttl is not None else None,
    ))


# --- Escalares y tabla de vecinos ---
def encode_uint(value: int) -> bytes:
    return _dumps(value)


def decode_uint(raw: bytes) -> int:
    return _uint(_loads(raw))


def encode_neighbors(neighbors: list[NeighborEntry]) -> bytes:
    return _dumps([[n.addr, n.rssi_dbm, n.etx_x128] for n in neighbors])


def decode_neighbors(raw: bytes) -> list[NeighborEntry]:
    out = []
    for item in _array(_loads(raw)):
        addr, rssi, etx = _array(item, (3,))
        out.append(_validated(lambda: NeighborEntry(addr=_uint(addr), rssi_dbm=_int(rssi), etx_x128=_uint(etx))))
    return out
