from codec import decode_topology_report, encode_node_settings
from coap import Code, ResourceRouter, SbiRequest, SbiResponse
import logging

logger = logging.getLogger(__name__)

router = ResourceRouter()


# --- Recursos del controlador ---

@router.post("")
def receive_topology_report(request: SbiRequest) -> SbiResponse:
    """
    Incorpora un Topology Update al grafo. La primera vez que un nodo
    reporta, la respuesta lleva su configuración.
    """
    controller = request.owner
    report = decode_topology_report(request.payload)
    if report.node_addr != request.src:
        logger.warning(f"Reporte de {report.node_addr} recibido desde {request.src}; se usa el origen declarado.")
    controller.merge_report(report)
    settings = controller.settings_for(report.node_addr)
    if settings is None:
        return SbiResponse(Code.CHANGED)
    return SbiResponse(Code.CHANGED, encode_node_settings(settings))
