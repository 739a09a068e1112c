from codec import encode_neighbors
from coap import Code, ResourceRouter, SbiRequest, SbiResponse

router = ResourceRouter()


@router.get("")
def read_neighbors(request: SbiRequest) -> SbiResponse:
    return SbiResponse(Code.CONTENT, encode_neighbors(request.owner.neighbors.snapshot()))
