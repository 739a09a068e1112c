from codec import decode_uint, encode_uint
from coap import Code, ResourceRouter, SbiException, SbiRequest, SbiResponse

router = ResourceRouter()


@router.get("")
def read_update_period(request: SbiRequest) -> SbiResponse:
    return SbiResponse(Code.CONTENT, encode_uint(int(request.owner.config.update_period_s)))


@router.post("")
def change_update_period(request: SbiRequest) -> SbiResponse:
    """Cambia el período del Topology Update y reagenda el próximo reporte."""
    period = decode_uint(request.payload)
    if period < 1:
        raise SbiException(Code.INTERNAL_ERROR, "el período debe ser >= 1 s")
    request.owner.set_update_period(period)
    return SbiResponse(Code.CHANGED)
