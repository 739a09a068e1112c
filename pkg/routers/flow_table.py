from codec import decode_flow_entries, encode_flow_entries
from coap import Code, ResourceRouter, SbiException, SbiRequest, SbiResponse
from flow_table import InstallResult
import logging

logger = logging.getLogger(__name__)

router = ResourceRouter()


# --- Recursos de la Flow Table (los atiende el nodo) ---

@router.get("")
def read_flow_table(request: SbiRequest) -> SbiResponse:
    """
    Devuelve las entradas instaladas, en orden de examen.
    """
    node = request.owner
    node._age_table()
    return SbiResponse(Code.CONTENT, encode_flow_entries(node.flow_table.entries))


@router.put("")
def install_flow_entries(request: SbiRequest) -> SbiResponse:
    """
    Instala (o reemplaza) las entradas recibidas. Si alguna no entra por
    capacidad se responde 5.00, pero las demás quedan instaladas.
    """
    node = request.owner
    entries = decode_flow_entries(request.payload)
    results = node.install_entries(entries)
    rejected = sum(1 for r in results if r is InstallResult.REJECTED)
    if rejected:
        logger.warning(f"Nodo {node.addr}: {rejected} de {len(entries)} entradas rechazadas por capacidad.")
        raise SbiException(Code.INTERNAL_ERROR, "flow table llena")
    return SbiResponse(Code.CHANGED)


@router.delete("")
def clear_flow_table(request: SbiRequest) -> SbiResponse:
    node = request.owner
    node.flow_table.clear()
    logger.info(f"Nodo {node.addr}: flow table vaciada por el controlador.")
    return SbiResponse(Code.DELETED)
