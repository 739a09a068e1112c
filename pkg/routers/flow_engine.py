from codec import decode_table_miss, decode_uint, encode_flow_entries
from coap import Code, ResourceRouter, SbiException, SbiRequest, SbiResponse
import logging

logger = logging.getLogger(__name__)

router = ResourceRouter()


@router.post("")
def resolve_table_miss(request: SbiRequest) -> SbiResponse:
    """
    Resuelve un table miss: calcula el camino hasta el destino final, instala
    el estado en el registro e instruye al resto de los nodos del camino.
    """
    from controller import FlowRequest, Unreachable

    controller = request.owner
    report = decode_table_miss(request.payload)
    try:
        entries = controller.handle_flow_engine_post(FlowRequest.from_report(report, controller.scheduler.now))
    except Unreachable as exc:
        logger.info(f"Table miss de {report.node_addr} sin camino: {exc}")
        raise SbiException(Code.NOT_FOUND, str(exc))
    return SbiResponse(Code.CONTENT, encode_flow_entries(entries))


@router.get("")
def read_node_entries(request: SbiRequest) -> SbiResponse:
    """Consulta proactiva: entradas vigentes que el controlador tiene para un nodo."""
    controller = request.owner
    node = decode_uint(request.payload)
    return SbiResponse(Code.CONTENT, encode_flow_entries(controller.handle_flow_engine_get(node, controller.scheduler.now)))
