"""Layered bitstream container.

Layout (all integers little-endian)::

    "SPCC" | version u8 | depth u8 | region u32 | n_points u32 | L u8
    L x (qp u8, sf u16, sr u8)
    L x (layer_len u32, layer payload)

A layer payload is ``n_records u32`` followed by records.  Length prefixes
let a reader skip later layers without touching their bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .basecodec import BlockRecord
from .core import CodingConfig, CorruptStream
from .enhancement import MODE_INTRA, MODE_PREDICTED, CoordStreams, EnhancementRecord
from .entropy import RansStream
from .octree import OctreeStream

MAGIC = b"SPCC"
VERSION = 1


class ByteReader:
    """Cursor over a buffer that records which byte ranges were read."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = memoryview(data)
        self.pos = offset
        self.touched: list[tuple[int, int]] = []

    def read(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptStream(f"truncated container at offset {self.pos} (wanted {n} bytes)")
        out = bytes(self.data[self.pos:self.pos + n])
        self.touched.append((self.pos, self.pos + n))
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))

    def skip(self, n: int):
        if self.pos + n > len(self.data):
            raise CorruptStream(f"layer length {n} runs past the end of the container")
        self.pos += n

    def bytes_read(self) -> int:
        return sum(b - a for a, b in self.touched)

    def was_read(self, lo: int, hi: int) -> bool:
        return any(a < hi and lo < b for a, b in self.touched)


# ----------------------------------------------------------------- record codecs
def _put_rans(out: bytearray, s: RansStream):
    out += s.to_bytes()


def _get_rans(r: ByteReader) -> RansStream:
    count, length = r.unpack("<II")
    return RansStream(r.read(length), count)


def _put_octree(out: bytearray, s: OctreeStream):
    out += struct.pack("<BI", s.depth, len(s.occupancy_bytes)) + s.occupancy_bytes


def _get_octree(r: ByteReader) -> OctreeStream:
    depth, length = r.unpack("<BI")
    return OctreeStream(depth, r.read(length))


def _put_block(out: bytearray, rec: BlockRecord):
    out += struct.pack("<QI", rec.index, rec.k)
    _put_octree(out, rec.coords_stream)
    _put_rans(out, rec.hyper_stream)
    _put_rans(out, rec.latent_stream)


def _get_block(r: ByteReader) -> BlockRecord:
    index, k = r.unpack("<QI")
    return BlockRecord(index, k, _get_octree(r), _get_rans(r), _get_rans(r))


def _put_enh(out: bytearray, rec: EnhancementRecord, up: bool):
    out += struct.pack("<QBI", rec.index, rec.mode, rec.k)
    if rec.mode == MODE_INTRA:
        _put_block(out, rec.intra)
        return
    _put_rans(out, rec.latent_stream)
    if up:
        has_esc = rec.coords.escape is not None
        out += struct.pack("<B", int(has_esc))
        _put_rans(out, rec.coords.occupancy)
        if has_esc:
            _put_octree(out, rec.coords.escape)


def _get_enh(r: ByteReader, up: bool) -> EnhancementRecord:
    index, mode, k = r.unpack("<QBI")
    if mode == MODE_INTRA:
        return EnhancementRecord(index, k, mode=MODE_INTRA, intra=_get_block(r))
    if mode != MODE_PREDICTED:
        raise CorruptStream(f"unknown record mode {mode}")
    latent = _get_rans(r)
    coords = None
    if up:
        (has_esc,) = r.unpack("<B")
        occ = _get_rans(r)
        coords = CoordStreams(occ, _get_octree(r) if has_esc else None)
    return EnhancementRecord(index, k, latent, coords)


# ----------------------------------------------------------------- container
@dataclass
class Container:
    depth: int
    region: int
    n_points: int
    chain: list
    layers: list = field(default_factory=list)

    def layer_up(self, t: int) -> bool:
        return t > 0 and self.chain[t - 1].sf == 2 * self.chain[t].sf

    def header_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<BBIIB", VERSION, self.depth, self.region, self.n_points, len(self.chain))
        for c in self.chain:
            out += struct.pack("<BHB", c.qp, c.sf, int(c.sr))
        return bytes(out)

    def layer_bytes(self, t: int) -> bytes:
        recs = self.layers[t]
        out = bytearray(struct.pack("<I", len(recs)))
        for rec in recs:
            if t == 0:
                _put_block(out, rec)
            else:
                _put_enh(out, rec, self.layer_up(t))
        return bytes(out)

    def serialize(self) -> bytes:
        if len(self.layers) != len(self.chain):
            raise ValueError("container needs one record list per chain entry")
        out = bytearray(self.header_bytes())
        for t in range(len(self.layers)):
            body = self.layer_bytes(t)
            out += struct.pack("<I", len(body)) + body
        return bytes(out)

    def layer_sizes(self) -> list[int]:
        """Bytes per layer including the header (layer 0) and length prefixes."""
        sizes = [4 + len(self.layer_bytes(t)) for t in range(len(self.layers))]
        if sizes:
            sizes[0] += len(self.header_bytes())
        return sizes


def parse_header(r: ByteReader) -> Container:
    if r.read(4) != MAGIC:
        raise CorruptStream("not an SPCC container")
    version, depth, region, n_points, n_layers = r.unpack("<BBIIB")
    if version != VERSION:
        raise CorruptStream(f"unsupported container version {version}")
    chain = []
    for _ in range(n_layers):
        qp, sf, sr = r.unpack("<BHB")
        try:
            chain.append(CodingConfig(qp, sf, bool(sr)))
        except ValueError as exc:
            raise CorruptStream(f"bad configuration in header: {exc}") from exc
    return Container(depth, region, n_points, chain)


def parse(data: bytes, upto: int | None = None, reader: ByteReader | None = None) -> Container:
    """Parse a container; with ``upto`` only layers ``0..upto`` are read, the rest skipped."""
    r = ByteReader(data) if reader is None else reader
    c = parse_header(r)
    last = len(c.chain) - 1 if upto is None else upto
    if not (0 <= last < len(c.chain)):
        raise ValueError(f"layer {upto} out of range for a {len(c.chain)}-layer stream")
    for t in range(len(c.chain)):
        (length,) = r.unpack("<I")
        if t > last:
            r.skip(length)
            continue
        end = r.pos + length
        (n,) = r.unpack("<I")
        recs = [_get_block(r) if t == 0 else _get_enh(r, c.layer_up(t)) for _ in range(n)]
        if r.pos != end:
            raise CorruptStream(f"layer {t} length mismatch ({r.pos - (end - length)} vs {length} bytes)")
        c.layers.append(recs)
    if upto is None and r.pos != len(r.data):
        raise CorruptStream("trailing bytes after the last layer")
    return c
