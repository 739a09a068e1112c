from pydantic import BaseModel, Field, field_validator, model_validator
from typing import List, Optional
import enum

from flow_table import DEFAULT_KEY_FEATURES, KeyFeature
from lowpan import MAX_NODE_ADDR

# --- Enumeraciones para mejorar la legibilidad y validación ---
class NodeRole(str, enum.Enum):
    SENDER = "sender"
    FORWARDER = "forwarder"
    BORDER_ROUTER = "border_router"

class StackMode(str, enum.Enum):
    SDN = "sdn"
    RPL = "rpl"   # línea base RPL storing + route-over

class PathMetric(str, enum.Enum):
    HOP = "hop"
    ETX = "etx"

class UpstreamMatch(str, enum.Enum):
    GATEWAY = "gateway"   # la entrada upstream sólo captura tráfico hacia el border router
    ANY = "any"           # entrada por defecto sin reglas

class ControlCategory(str, enum.Enum):
    DIO = "DIO"
    DAO = "DAO"
    TOPOLOGY_UPDATE = "TOPOLOGY_UPDATE"
    TABLE_MISS_REQ = "TABLE_MISS_REQ"
    TABLE_MISS_RESP = "TABLE_MISS_RESP"
    FLOW_PUT = "FLOW_PUT"
    OTHER_SBI = "OTHER_SBI"
    DATA = "DATA"

CONTROL_CATEGORIES = tuple(c for c in ControlCategory if c is not ControlCategory.DATA)

class Window(str, enum.Enum):
    WARMUP = "warmup"
    STEADY = "steady"


# --- Secciones del escenario ---
class NodeSpec(BaseModel):
    id: int = Field(..., ge=1, le=MAX_NODE_ADDR, description="Dirección corta del nodo")
    x_m: float
    y_m: float
    role: NodeRole = NodeRole.FORWARDER
    destination: Optional[int] = Field(None, description="Par M2M; None = servidor UDP externo")

    @model_validator(mode="after")
    def check_destination(self):
        if self.destination is not None:
            if self.role is not NodeRole.SENDER:
                raise ValueError(f"el nodo {self.id} no es sender y no puede tener destino")
            if self.destination == self.id:
                raise ValueError(f"el nodo {self.id} no puede enviarse tráfico a sí mismo")
        return self

class UdgmParams(BaseModel):
    tx_range_m: float = Field(50.0, gt=0)
    interference_range_m: float = Field(100.0, gt=0)
    p_tx_success: float = Field(1.0, ge=0, le=1)
    p_rx_success: float = Field(1.0, ge=0, le=1)

    @model_validator(mode="after")
    def check_ranges(self):
        if self.interference_range_m < self.tx_range_m:
            raise ValueError("interference_range_m debe ser >= tx_range_m")
        return self

class CostModel(BaseModel):
    bitrate_bps: int = Field(250_000, gt=0)
    t_proc_mesh_us: int = Field(500, ge=0)
    t_proc_routeover_base_us: int = Field(2000, ge=0)
    t_proc_routeover_per_frag_us: int = Field(1000, ge=0)
    t_ext_link_ms: float = Field(5.0, ge=0)

    @model_validator(mode="after")
    def check_calibration(self):
        if self.t_proc_routeover_base_us + self.t_proc_routeover_per_frag_us < self.t_proc_mesh_us:
            raise ValueError("el costo route-over por salto debe ser >= el costo mesh-under por fragmento")
        return self

class LinkParams(BaseModel):
    max_frame: int = Field(127, ge=20, le=127)
    mac_overhead: int = Field(11, ge=11)
    compressed_header_len: int = Field(10, ge=0)
    payload_window: int = Field(16, ge=1, le=16)
    dio_bytes: int = Field(76, ge=1)
    dao_bytes: int = Field(40, ge=1)
    reassembly_timeout_s: float = Field(8.0, gt=0)

class MacParams(BaseModel):
    max_retries: int = Field(3, ge=0)
    backoff_max_us: int = Field(2400, ge=0)
    cca_max_redraws: int = Field(5, ge=0)
    ack_bytes: int = Field(11, ge=1)
    ack_timeout_us: int = Field(1000, gt=0)
    turnaround_us: int = Field(192, ge=0)

class TrafficParams(BaseModel):
    payload_bytes: int = Field(40, ge=1)
    period_min_s: float = Field(30.0, gt=0)
    period_max_s: float = Field(90.0, gt=0)

    @model_validator(mode="after")
    def check_period(self):
        if self.period_min_s > self.period_max_s:
            raise ValueError("period_min_s no puede superar period_max_s")
        return self

class SdnParams(BaseModel):
    flow_table_capacity: int = Field(40, ge=1)
    update_period_s: float = Field(1200.0, gt=0)
    key_features: List[KeyFeature] = Field(default_factory=lambda: list(DEFAULT_KEY_FEATURES))
    default_ttl_s: float = Field(600.0, gt=0)
    miss_queue_cap: int = Field(4, ge=1)
    first_report_delay_s: float = Field(60.0, ge=0, description="Espera tras unirse al DODAG antes del primer reporte")
    battery_level: int = Field(100, ge=0, le=255)
    path_metric: PathMetric = PathMetric.ETX
    upstream_match: UpstreamMatch = UpstreamMatch.GATEWAY
    proactive_fetch: bool = False
    repair: bool = True

class RplParams(BaseModel):
    routing_capacity: int = Field(40, ge=1)
    dao_period_s: float = Field(60.0, gt=0)
    i_min_s: float = Field(4.0, gt=0)
    doublings: int = Field(8, ge=0)
    hysteresis: int = Field(192, ge=0, description="Unidades de rango (1.5 x 128)")
    route_lifetime_periods: int = Field(3, ge=1)

class RunParams(BaseModel):
    duration_s: float = Field(3600.0, gt=0)
    warmup_s: float = Field(900.0, ge=0)
    replicas: int = Field(20, ge=1)
    base_seed: int = Field(1, ge=0)

    @model_validator(mode="after")
    def check_warmup(self):
        if self.warmup_s >= self.duration_s:
            raise ValueError("warmup_s debe ser menor que duration_s")
        return self


class Scenario(BaseModel):
    name: str = "escenario"
    nodes: List[NodeSpec] = Field(..., min_length=1)
    channel: UdgmParams = Field(default_factory=UdgmParams)
    costs: CostModel = Field(default_factory=CostModel)
    link: LinkParams = Field(default_factory=LinkParams)
    mac: MacParams = Field(default_factory=MacParams)
    traffic: TrafficParams = Field(default_factory=TrafficParams)
    sdn: SdnParams = Field(default_factory=SdnParams)
    rpl: RplParams = Field(default_factory=RplParams)
    run: RunParams = Field(default_factory=RunParams)

    @field_validator("nodes")
    def check_unique_ids(cls, v):
        seen = set()
        for node in v:
            if node.id in seen:
                raise ValueError(f"id de nodo duplicado: {node.id}")
            seen.add(node.id)
        return v

    @model_validator(mode="after")
    def check_topology(self):
        routers = [n.id for n in self.nodes if n.role is NodeRole.BORDER_ROUTER]
        if len(routers) != 1:
            raise ValueError(f"se requiere exactamente un border_router, hay {len(routers)}")
        ids = {n.id for n in self.nodes}
        for node in self.nodes:
            if node.destination is not None and node.destination not in ids:
                raise ValueError(f"el destino {node.destination} del nodo {node.id} no existe")
        return self

    @property
    def border_router(self) -> NodeSpec:
        return next(n for n in self.nodes if n.role is NodeRole.BORDER_ROUTER)

    def node(self, addr: int) -> NodeSpec:
        return next(n for n in self.nodes if n.id == addr)


class NodeConfig(BaseModel):
    """Configuración viva de un nodo; el controlador puede cambiarla vía SBI."""
    addr: int = Field(..., ge=1, le=MAX_NODE_ADDR)
    role: NodeRole
    mode: StackMode
    gateway: int
    update_period_s: float = Field(1200.0, gt=0)
    key_features: List[KeyFeature] = Field(default_factory=lambda: list(DEFAULT_KEY_FEATURES))
    miss_queue_cap: int = Field(4, ge=1)
    default_ttl_s: float = Field(600.0, gt=0)

    @property
    def is_gateway(self) -> bool:
        return self.role is NodeRole.BORDER_ROUTER
