"""
Carga de escenarios en formato clave = valor (estilo dotenv).

    run.duration_s = 3600
    channel.tx_range_m = 50
    sdn.key_features = MESH_ORIG:0:16,MESH_FINAL:0:16
    node.1 = 0 80 border_router
    node.20 = 200 0 sender server
    node.21 = 200 40 sender 26

Las claves son `sección.campo`; los nodos se declaran como
`node.<id> = <x_m> <y_m> <rol> [server|<id destino>]`.
"""
import io
import logging
from pathlib import Path
from typing import Optional, Union

from dotenv.parser import parse_stream
from pydantic import ValidationError as PydanticValidationError

from flow_table import FieldSelector
from models import (
    CostModel,
    LinkParams,
    MacParams,
    NodeRole,
    RplParams,
    RunParams,
    Scenario,
    SdnParams,
    TrafficParams,
    UdgmParams,
)

logger = logging.getLogger(__name__)

SECTIONS = {
    "run": RunParams,
    "channel": UdgmParams,
    "costs": CostModel,
    "link": LinkParams,
    "mac": MacParams,
    "traffic": TrafficParams,
    "sdn": SdnParams,
    "rpl": RplParams,
}


class ScenarioError(Exception):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        where = ", ".join(p for p in (f"clave '{key}'" if key else "", f"línea {line}" if line else "") if p)
        super().__init__(f"{message} ({where})" if where else message)
        self.key = key
        self.line = line


class ParseError(ScenarioError):
    pass


class ValidationError(ScenarioError):
    pass


def parse_key_features(value: str, key: str = "sdn.key_features", line: Optional[int] = None) -> list[dict]:
    """`FIELD:offset:size` separados por comas; vacío = reportar la trama completa."""
    out = []
    for item in (p.strip() for p in value.split(",")):
        if not item:
            continue
        parts = item.split(":")
        if len(parts) != 3:
            raise ParseError(f"key feature inválida '{item}', se espera CAMPO:offset:tamaño", key, line)
        name, offset, size = parts
        try:
            out.append({"field": FieldSelector(name.strip().upper()), "offset_bits": int(offset), "size_bits": int(size)})
        except ValueError as exc:
            raise ParseError(f"key feature inválida '{item}': {exc}", key, line) from exc
    return out


def _parse_node(key: str, value: str, line: int) -> dict:
    try:
        node_id = int(key.split(".", 1)[1])
    except ValueError:
        raise ParseError("el id de nodo debe ser entero", key, line) from None
    tokens = value.split()
    if len(tokens) not in (3, 4):
        raise ParseError("se espera '<x> <y> <rol> [destino]'", key, line)
    try:
        x, y = float(tokens[0]), float(tokens[1])
        role = NodeRole(tokens[2].lower())
    except ValueError as exc:
        raise ParseError(f"nodo inválido: {exc}", key, line) from exc
    node = {"id": node_id, "x_m": x, "y_m": y, "role": role}
    if len(tokens) == 4:
        if tokens[3].lower() != "server":
            try:
                node["destination"] = int(tokens[3])
            except ValueError:
                raise ParseError(f"destino inválido '{tokens[3]}'", key, line) from None
        if role is not NodeRole.SENDER:
            raise ValidationError(f"el nodo {node_id} no es sender y declara destino", key, line)
    return node


def _check_topology(nodes: list[dict], lines: dict[str, int]) -> None:
    """Chequeos entre nodos, con la línea del nodo culpable."""
    routers = [n for n in nodes if n["role"] is NodeRole.BORDER_ROUTER]
    if not routers:
        raise ValidationError("el escenario no declara un border_router")
    if len(routers) > 1:
        key = f"node.{routers[1]['id']}"
        raise ValidationError(f"se requiere exactamente un border_router, hay {len(routers)}", key, lines.get(key))
    ids = {n["id"] for n in nodes}
    for n in nodes:
        dst = n.get("destination")
        key = f"node.{n['id']}"
        if dst is not None and dst not in ids:
            raise ValidationError(f"el destino {dst} del nodo {n['id']} no existe", key, lines.get(key))
        if dst == n["id"]:
            raise ValidationError(f"el nodo {n['id']} no puede enviarse tráfico a sí mismo", key, lines.get(key))


def _locate(exc: PydanticValidationError, nodes: list[dict], lines: dict[str, int]) -> tuple[Optional[str], Optional[int]]:
    loc = exc.errors()[0]["loc"]
    if not loc:
        return None, None
    if loc[0] == "nodes":
        if len(loc) > 1 and isinstance(loc[1], int) and loc[1] < len(nodes):
            key = f"node.{nodes[loc[1]]['id']}"
            return key, lines.get(key)
        return "node", None
    key = ".".join(str(p) for p in loc[:2])
    return key, lines.get(key)


def _binding_line(binding) -> int:
    # El binding arranca en la primera línea en blanco que lo precede
    raw = binding.original.string
    return binding.original.line + raw[: len(raw) - len(raw.lstrip())].count("\n")


def parse_scenario(text: str, name: str = "escenario") -> Scenario:
    sections: dict[str, dict] = {}
    nodes: list[dict] = []
    lines: dict[str, int] = {}

    for binding in parse_stream(io.StringIO(text)):
        line = _binding_line(binding)
        if binding.error:
            raise ParseError(f"no se pudo interpretar '{binding.original.string.strip()}'", line=line)
        if binding.key is None:
            continue
        key = binding.key.strip()
        value = (binding.value or "").strip()

        if key == "name":
            name = value
            continue
        if "." not in key:
            raise ParseError("clave desconocida", key, line)
        section, field = key.split(".", 1)

        if section == "node":
            if key in lines:
                raise ValidationError(f"id de nodo duplicado: {field}", key, line)
            nodes.append(_parse_node(key, value, line))
            lines[key] = line
            continue
        model = SECTIONS.get(section)
        if model is None or field not in model.model_fields:
            raise ParseError("clave desconocida", key, line)
        if key in lines:
            raise ParseError(f"clave repetida (ya definida en la línea {lines[key]})", key, line)
        lines[key] = line
        if section == "sdn" and field == "key_features":
            sections.setdefault(section, {})[field] = parse_key_features(value, key, line)
        else:
            sections.setdefault(section, {})[field] = value

    if not nodes:
        raise ValidationError("el escenario no declara nodos")
    if "channel" not in sections:
        logger.warning(f"⚠️ Escenario '{name}' sin sección channel: se usan los valores por defecto del canal UDGM.")
    _check_topology(nodes, lines)

    try:
        return Scenario(name=name, nodes=nodes, **sections)
    except PydanticValidationError as exc:
        key, line = _locate(exc, nodes, lines)
        raise ValidationError(exc.errors()[0]["msg"], key, line) from exc


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"no se pudo leer {path}: {exc}") from exc
    scenario = parse_scenario(text, name=path.stem)
    logger.info(f"📄 Escenario '{scenario.name}' cargado: {len(scenario.nodes)} nodos.")
    return scenario
