"""
Tramas 802.15.4 y cabeceras 6LoWPAN (mesh, FRAG1/FRAGN).

La compresión de cabeceras se modela por tamaño: un datagrama sólo declara
cuántos bytes ocupa su cabecera IPv6/UDP comprimida y cuántos su carga útil.
Las cabeceras mesh y de fragmentación sí se serializan bit a bit (RFC 4944)
para que el modo "paquete completo" de los table miss pueda enviarlas.
"""
import binascii
import enum
import itertools
import struct
from dataclasses import dataclass, field
from typing import Any, Optional

import logging

logger = logging.getLogger(__name__)

# --- Direcciones ---
BROADCAST_ADDR = 0xFFFF
# Identificadores de los extremos que viven fuera de la WSN, detrás del border router
CONTROLLER_ADDR = 0xFFF0
SERVER_ADDR = 0xFFF1
MAX_NODE_ADDR = 0xFFEF

# --- Tamaños fijos ---
MESH_HEADER_SIZE = 5
FRAG1_HEADER_SIZE = 4
FRAGN_HEADER_SIZE = 5
MAC_HEADER_SIZE = 9
MAC_FCS_SIZE = 2
MAX_DATAGRAM_SIZE = 2047
HOPS_LEFT_INIT = 14
PAN_ID = 0xABCD


def is_external(addr: int) -> bool:
    return addr in (CONTROLLER_ADDR, SERVER_ADDR)


class LowpanError(Exception):
    """Error base de la capa de adaptación."""


class DatagramTooLarge(LowpanError):
    pass


class InconsistentSize(LowpanError):
    pass


class DatagramKind(str, enum.Enum):
    UDP_DATA = "udp_data"
    SBI = "sbi"
    RPL_DIO = "rpl_dio"
    RPL_DAO = "rpl_dao"


RPL_KINDS = (DatagramKind.RPL_DIO, DatagramKind.RPL_DAO)


@dataclass(frozen=True, slots=True)
class MeshHeader:
    hops_left: int
    originator: int
    final: int

    @property
    def size(self) -> int:
        return MESH_HEADER_SIZE

    def to_bytes(self) -> bytes:
        # 10 V F HopsLeft: direcciones cortas en ambos campos
        return struct.pack(">BHH", 0xB0 | (self.hops_left & 0x0F), self.originator, self.final)


@dataclass(frozen=True, slots=True)
class FragHeader:
    datagram_size: int
    tag: int
    offset_units: int = 0
    is_first: bool = True

    @property
    def size(self) -> int:
        return FRAG1_HEADER_SIZE if self.is_first else FRAGN_HEADER_SIZE

    @property
    def offset(self) -> int:
        return self.offset_units * 8

    def to_bytes(self) -> bytes:
        if self.is_first:
            return struct.pack(">HH", 0xC000 | self.datagram_size, self.tag)
        return struct.pack(">HHB", 0xE000 | self.datagram_size, self.tag, self.offset_units)


_datagram_ids = itertools.count(1)


@dataclass(eq=False, slots=True)
class Datagram:
    """
    Datagrama IPv6 comprimido. `data` guarda los primeros bytes visibles
    (los que alimentan la ventana de payload) y `content` el objeto de capa
    superior que viaja con él dentro del simulador.
    """
    src: int
    dst: int
    kind: DatagramKind
    app_payload_len: int
    compressed_header_len: int = 10
    created_at: int = 0
    data: bytes = b""
    content: Any = None
    category: Any = None
    uid: int = field(default_factory=lambda: next(_datagram_ids))
    trail: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.app_payload_len + self.compressed_header_len

    def window(self, size: int) -> bytes:
        n = min(size, self.total)
        return (self.data + bytes(n))[:n]

    def body(self) -> bytes:
        return (self.data + bytes(self.total))[: self.total]


@dataclass(frozen=True, slots=True)
class LinkLimits:
    max_frame: int = 127
    mac_overhead: int = MAC_HEADER_SIZE + MAC_FCS_SIZE
    payload_window: int = 16

    def budget(self, mesh: Optional[MeshHeader]) -> int:
        return self.max_frame - self.mac_overhead - (mesh.size if mesh else 0)


@dataclass(frozen=True, slots=True)
class Frame:
    mac_src: int
    mac_dst: int
    payload_len: int
    mesh: Optional[MeshHeader] = None
    frag: Optional[FragHeader] = None
    payload_window: bytes = b""
    datagram: Optional[Datagram] = None
    mac_overhead: int = MAC_HEADER_SIZE + MAC_FCS_SIZE
    seq: int = 0

    @property
    def datagram_ref(self) -> Optional[int]:
        return self.datagram.uid if self.datagram is not None else None

    @property
    def kind(self) -> Optional[DatagramKind]:
        return self.datagram.kind if self.datagram is not None else None

    @property
    def carries_start(self) -> bool:
        """True si la trama lleva el comienzo del datagrama."""
        return self.frag is None or self.frag.is_first

    def to_bytes(self) -> bytes:
        """
        Serializa la trama completa: cabecera MAC (FCF, secuencia, PAN,
        destino, origen), cabeceras 6LoWPAN, carga y FCS. La longitud
        coincide con on_air_bytes.
        """
        header = struct.pack("<HBHHH", 0x8841, self.seq & 0xFF, PAN_ID, self.mac_dst, self.mac_src)
        header += bytes(max(0, self.mac_overhead - MAC_HEADER_SIZE - MAC_FCS_SIZE))
        if self.mesh is not None:
            header += self.mesh.to_bytes()
        if self.frag is not None:
            header += self.frag.to_bytes()
        if self.datagram is not None:
            start = self.frag.offset if self.frag is not None else 0
            payload = self.datagram.body()[start:start + self.payload_len]
        else:
            payload = (self.payload_window + bytes(self.payload_len))[: self.payload_len]
        raw = header + payload
        return raw + struct.pack("<H", binascii.crc_hqx(raw, 0))


@dataclass(frozen=True, slots=True)
class ParsedFrame:
    mac_src: int
    mac_dst: int
    mesh: Optional[MeshHeader]
    frag: Optional[FragHeader]
    payload: bytes


def parse_frame(raw: bytes, mac_overhead: int = MAC_HEADER_SIZE + MAC_FCS_SIZE) -> ParsedFrame:
    """Recupera direcciones y cabeceras 6LoWPAN de una trama serializada con to_bytes."""
    pad = max(0, mac_overhead - MAC_HEADER_SIZE - MAC_FCS_SIZE)
    if len(raw) < MAC_HEADER_SIZE + pad + MAC_FCS_SIZE:
        raise LowpanError("trama truncada")
    _, _, _, mac_dst, mac_src = struct.unpack_from("<HBHHH", raw, 0)
    pos = MAC_HEADER_SIZE + pad
    end = len(raw) - MAC_FCS_SIZE
    mesh = frag = None
    if pos < end and raw[pos] & 0xC0 == 0x80:
        if end - pos < MESH_HEADER_SIZE:
            raise LowpanError("cabecera mesh truncada")
        dispatch, orig, final = struct.unpack_from(">BHH", raw, pos)
        mesh = MeshHeader(dispatch & 0x0F, orig, final)
        pos += MESH_HEADER_SIZE
    if pos + 1 < end and raw[pos] & 0xF8 in (0xC0, 0xE0):
        first = raw[pos] & 0xF8 == 0xC0
        size = FRAG1_HEADER_SIZE if first else FRAGN_HEADER_SIZE
        if end - pos < size:
            raise LowpanError("cabecera de fragmentación truncada")
        word, tag = struct.unpack_from(">HH", raw, pos)
        offset = 0 if first else raw[pos + 4]
        frag = FragHeader(word & 0x07FF, tag, offset, first)
        pos += size
    return ParsedFrame(mac_src, mac_dst, mesh, frag, raw[pos:end])


def on_air_bytes(f: Frame) -> int:
    return (
        f.mac_overhead
        + (f.mesh.size if f.mesh is not None else 0)
        + (f.frag.size if f.frag is not None else 0)
        + f.payload_len
    )


def fragment_count(total: int, mesh: Optional[MeshHeader] = None, limits: LinkLimits = LinkLimits()) -> int:
    budget = limits.budget(mesh)
    if total <= budget:
        return 1
    cap1 = (budget - FRAG1_HEADER_SIZE) // 8 * 8
    capn = (budget - FRAGN_HEADER_SIZE) // 8 * 8
    return 1 + -(-(total - cap1) // capn)


def fragment(
    d: Datagram,
    mesh: Optional[MeshHeader] = None,
    limits: LinkLimits = LinkLimits(),
    tag: int = 0,
    mac_src: int = 0,
    mac_dst: int = BROADCAST_ADDR,
) -> list[Frame]:
    """
    Divide un datagrama en tramas. Si cabe en el presupuesto de una trama se
    devuelve sin cabecera de fragmentación; si no, FRAG1 seguido de FRAGN,
    todas con la misma cabecera mesh y el mismo tag.
    """
    total = d.total
    if total < 1:
        raise LowpanError("el datagrama debe ocupar al menos 1 byte")
    if total > MAX_DATAGRAM_SIZE:
        raise DatagramTooLarge(f"datagrama de {total} bytes excede {MAX_DATAGRAM_SIZE}")

    window = d.window(limits.payload_window)
    common = dict(
        mac_src=mac_src,
        mac_dst=mac_dst,
        mesh=mesh,
        payload_window=window,
        datagram=d,
        mac_overhead=limits.mac_overhead,
    )
    budget = limits.budget(mesh)
    if total <= budget:
        return [Frame(payload_len=total, **common)]

    cap1 = (budget - FRAG1_HEADER_SIZE) // 8 * 8
    capn = (budget - FRAGN_HEADER_SIZE) // 8 * 8
    if cap1 <= 0 or capn <= 0:
        raise LowpanError(f"presupuesto de trama insuficiente para fragmentar ({budget} bytes)")

    tag &= 0xFFFF
    frames = [Frame(payload_len=cap1, frag=FragHeader(total, tag, 0, True), **common)]
    offset = cap1
    while offset < total:
        size = min(capn, total - offset)
        frames.append(Frame(payload_len=size, frag=FragHeader(total, tag, offset // 8, False), **common))
        offset += size
    return frames


# --- Reensamblado ---

class ReassemblyStatus(str, enum.Enum):
    INCOMPLETE = "incomplete"
    COMPLETE = "complete"
    STALE = "stale"


@dataclass(frozen=True, slots=True)
class Reassembly:
    status: ReassemblyStatus
    datagram: Optional[Datagram] = None
    fragments: int = 1


@dataclass(slots=True)
class _Partial:
    datagram_size: int
    started_at: int
    datagram: Optional[Datagram]
    pieces: dict = field(default_factory=dict)


class ReassemblyBuffer:
    """Buffers de reensamblado indexados por (originador, tag)."""

    def __init__(self, timeout_us: int = 8_000_000):
        self.timeout_us = timeout_us
        self._partials: dict[tuple[int, int], _Partial] = {}

    def __len__(self) -> int:
        return len(self._partials)

    def purge(self, now: int) -> list[tuple[int, int]]:
        stale = [k for k, p in self._partials.items() if now - p.started_at > self.timeout_us]
        for key in stale:
            del self._partials[key]
        return stale

    def add(self, f: Frame, now: int = 0) -> Reassembly:
        if f.frag is None:
            return Reassembly(ReassemblyStatus.COMPLETE, f.datagram, 1)

        originator = f.mesh.originator if f.mesh is not None else f.mac_src
        key = (originator, f.frag.tag)
        partial = self._partials.get(key)
        if partial is not None and now - partial.started_at > self.timeout_us:
            del self._partials[key]
            return Reassembly(ReassemblyStatus.STALE)
        self.purge(now)

        if partial is None:
            partial = _Partial(f.frag.datagram_size, now, f.datagram)
            self._partials[key] = partial
        elif partial.datagram_size != f.frag.datagram_size:
            raise InconsistentSize(
                f"fragmentos de {originator:#06x}/{f.frag.tag} declaran {partial.datagram_size} y {f.frag.datagram_size} bytes"
            )

        offset = f.frag.offset
        partial.pieces[offset] = max(partial.pieces.get(offset, 0), f.payload_len)
        if partial.datagram is None:
            partial.datagram = f.datagram

        reach = 0
        for start in sorted(partial.pieces):
            if start > reach:
                return Reassembly(ReassemblyStatus.INCOMPLETE)
            reach = max(reach, start + partial.pieces[start])
        if reach < partial.datagram_size:
            return Reassembly(ReassemblyStatus.INCOMPLETE)

        del self._partials[key]
        return Reassembly(ReassemblyStatus.COMPLETE, partial.datagram, len(partial.pieces))


def reassemble(buf: ReassemblyBuffer, f: Frame, now: int = 0) -> Reassembly:
    return buf.add(f, now)


# --- Construcción de datagramas ---
IPHC_DISPATCH = 0x7E


def compressed_header(src: int, dst: int, payload_len: int, size: int) -> bytes:
    """Bytes visibles de la cabecera IPv6/UDP comprimida (sólo su longitud afecta al costo)."""
    raw = struct.pack(">BBHHH", IPHC_DISPATCH, 0x33, src, dst, payload_len & 0xFFFF)
    return (raw + bytes(size))[:size]


def build_datagram(
    src: int,
    dst: int,
    kind: DatagramKind,
    payload: bytes = b"",
    payload_len: Optional[int] = None,
    header_len: int = 10,
    **kwargs,
) -> Datagram:
    length = len(payload) if payload_len is None else payload_len
    data = compressed_header(src, dst, length, header_len) + payload[:length]
    return Datagram(src, dst, kind, length, header_len, data=data, **kwargs)
