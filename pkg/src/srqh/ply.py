"""Minimal PLY reader/writer for vertex positions and optional normals."""

from __future__ import annotations

import numpy as np

from .core import PointCloud, round_half_away

_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class PlyParseError(ValueError):
    def __init__(self, msg, line=None, offset=None):
        where = f" (line {line})" if line is not None else f" (byte offset {offset})" if offset is not None else ""
        super().__init__(msg + where)
        self.line, self.offset = line, offset


def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyParseError("missing 'ply' magic or 'end_header'", line=1)
    nl = data.find(b"\n", end)
    body = len(data) if nl < 0 else nl + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt, elements = None, []
    for no, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyParseError(f"unsupported format {' '.join(tok[1:])!r}", line=no)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyParseError(f"malformed element line {raw!r}", line=no)
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyParseError("property before any element", line=no)
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], "list"))
                continue
            if len(tok) != 3 or tok[1] not in _TYPES:
                raise PlyParseError(f"unsupported property type in {raw!r}", line=no)
            elements[-1][2].append((tok[2], _TYPES[tok[1]]))
        else:
            raise PlyParseError(f"unexpected header keyword {tok[0]!r}", line=no)
    if fmt is None:
        raise PlyParseError("no format line", line=2)
    if not elements or elements[0][0] != "vertex":
        raise PlyParseError("the first element must be 'vertex'", line=2)
    props = elements[0][2]
    if any(t == "list" for _, t in props):
        raise PlyParseError("list properties on vertices are not supported", line=2)
    names = [n for n, _ in props]
    for ax in "xyz":
        if ax not in names:
            raise PlyParseError(f"vertex element lacks property {ax!r}", line=2)
    return fmt, elements[0][1], props, body, len(lines) + 1


def read_ply(path, scale: float | None = None) -> PointCloud:
    """Read vertices, optionally multiply by ``scale``, and round to integer voxels."""
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, count, props, body, header_lines = _parse_header(data)
    names = [n for n, _ in props]
    if fmt == "ascii":
        rows = data[body:].decode("ascii", errors="replace").splitlines()
        if len(rows) < count:
            raise PlyParseError(f"expected {count} vertex rows, found {len(rows)}", line=header_lines + len(rows) + 1)
        try:
            arr = np.array([r.split()[:len(props)] for r in rows[:count]], dtype=np.float64).reshape(count, len(props))
        except ValueError as exc:
            raise PlyParseError(f"bad vertex row: {exc}", line=header_lines + 1) from exc
        cols = {n: arr[:, i] for i, n in enumerate(names)}
    else:
        dt = np.dtype([(n, "<" + t) for n, t in props])
        if len(data) - body < dt.itemsize * count:
            raise PlyParseError("binary vertex data truncated", offset=len(data))
        rec = np.frombuffer(data, dtype=dt, count=count, offset=body)
        cols = {n: rec[n].astype(np.float64) for n in names}
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    if scale is not None:
        pts = pts * float(scale)
    normals = None
    if all(n in cols for n in ("nx", "ny", "nz")):
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
    return PointCloud.from_points(round_half_away(pts).astype(np.int64), normals)


def write_ply(pc: PointCloud, path, binary: bool = False):
    pts = np.asarray(pc.points, dtype=np.int64)
    has_n = pc.normals is not None
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
            f"element vertex {len(pts)}", "property int x", "property int y", "property int z"]
    if has_n:
        head += ["property float nx", "property float ny", "property float nz"]
    head.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<i4"), ("y", "<i4"), ("z", "<i4")] + ([("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")] if has_n else [])
            rec = np.zeros(len(pts), dtype=fields)
            for i, ax in enumerate("xyz"):
                rec[ax] = pts[:, i]
            if has_n:
                for i, ax in enumerate(("nx", "ny", "nz")):
                    rec[ax] = pc.normals[:, i]
            fh.write(rec.tobytes())
        else:
            for i, p in enumerate(pts):
                line = f"{p[0]} {p[1]} {p[2]}"
                if has_n:
                    line += " " + " ".join(f"{float(v):.9g}" for v in pc.normals[i])
                fh.write((line + "\n").encode("ascii"))
