from codec import decode_key_features, encode_key_features
from coap import Code, ResourceRouter, SbiRequest, SbiResponse

router = ResourceRouter()


@router.get("")
def read_key_features(request: SbiRequest) -> SbiResponse:
    return SbiResponse(Code.CONTENT, encode_key_features(request.owner.config.key_features))


@router.post("")
def change_key_features(request: SbiRequest) -> SbiResponse:
    # Lista vacía: los próximos table miss envían la trama completa
    request.owner.config.key_features = decode_key_features(request.payload)
    return SbiResponse(Code.CHANGED)
