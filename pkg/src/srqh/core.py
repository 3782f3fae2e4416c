"""Sparse voxel primitives shared by every codec stage.

Coordinates are ``(N, 3)`` int64 arrays.  Most set operations go through a
packed 63-bit key (21 bits per axis, x most significant) whose integer order
is the lexicographic order of the coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

COORD_BITS = 21
COORD_LIMIT = 1 << COORD_BITS
_MASK = COORD_LIMIT - 1


class InvalidParameter(ValueError):
    pass


class InvalidInput(ValueError):
    pass


class RangeError(ValueError):
    pass


class StructuralMismatch(ValueError):
    pass


class CorruptStream(ValueError):
    pass


def is_power_of_two(n) -> bool:
    n = int(n)
    return n >= 1 and (n & (n - 1)) == 0


def _check_pow2(n, what="factor"):
    if not is_power_of_two(n):
        raise InvalidParameter(f"{what} must be a positive power of two, got {n}")


def as_coords(coords) -> np.ndarray:
    arr = np.asarray(coords, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInput(f"coordinates must have shape (N, 3), got {arr.shape}")
    return arr


def pack(coords: np.ndarray) -> np.ndarray:
    c = as_coords(coords)
    return (c[:, 0] << (2 * COORD_BITS)) | (c[:, 1] << COORD_BITS) | c[:, 2]


def unpack(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((keys.shape[0], 3), dtype=np.int64)
    out[:, 0] = keys >> (2 * COORD_BITS)
    out[:, 1] = (keys >> COORD_BITS) & _MASK
    out[:, 2] = keys & _MASK
    return out


def check_coords(coords, name="coords") -> np.ndarray:
    """Validate a coordinate array against the 21-bit container range."""
    c = as_coords(coords)
    if c.size and (c.min() < 0 or c.max() >= COORD_LIMIT):
        raise RangeError(f"{name} outside [0, 2^{COORD_BITS})")
    return c


def sort_unique(coords) -> np.ndarray:
    c = check_coords(coords)
    if len(c) == 0:
        return c
    return unpack(np.unique(pack(c)))


def is_sorted_unique(coords) -> bool:
    k = pack(coords)
    return bool(np.all(k[1:] > k[:-1]))


def lookup(sorted_keys: np.ndarray, query_keys: np.ndarray) -> np.ndarray:
    """Index of each query key in ``sorted_keys`` or -1 when absent."""
    if len(sorted_keys) == 0:
        return np.full(len(query_keys), -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, query_keys)
    pos = np.minimum(pos, len(sorted_keys) - 1)
    hit = sorted_keys[pos] == query_keys
    return np.where(hit, pos, -1)


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _morton(grid: np.ndarray) -> np.ndarray:
    code = np.zeros(len(grid), dtype=np.int64)
    for bit in range(COORD_BITS):
        for axis in range(3):
            code |= ((grid[:, axis] >> bit) & 1) << (3 * bit + 2 - axis)
    return code


def morton_code(coords) -> np.ndarray:
    """Bit-interleaved code with x as the most significant bit of each triple."""
    return _morton(as_coords(coords))


def morton_decode(codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    out = np.zeros((len(codes), 3), dtype=np.int64)
    for bit in range(COORD_BITS):
        for axis in range(3):
            out[:, axis] |= ((codes >> (3 * bit + 2 - axis)) & 1) << bit
    return out


@dataclass
class SparseTensor:
    """Sorted unique voxel coordinates paired with an ``(N, C)`` feature matrix."""

    coords: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.coords = as_coords(self.coords)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if len(self.features) != len(self.coords):
            raise InvalidInput("features rows must match coordinate count")

    def __len__(self):
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @classmethod
    def occupancy(cls, coords) -> "SparseTensor":
        c = sort_unique(coords)
        return cls(c, np.ones((len(c), 1)))

    def validate(self) -> "SparseTensor":
        if len(self.coords) > 1 and not is_sorted_unique(self.coords):
            raise InvalidInput("sparse tensor coordinates must be strictly sorted")
        return self


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = as_coords(self.points)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise InvalidInput("normals must match points")

    def __len__(self):
        return len(self.points)

    @classmethod
    def from_points(cls, points, normals=None) -> "PointCloud":
        """Build a sorted, deduplicated cloud (first normal wins on duplicates)."""
        pts = check_coords(points)
        keys = pack(pts)
        uniq, first = np.unique(keys, return_index=True)
        nrm = None
        if normals is not None:
            nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)[first]
            norm = np.linalg.norm(nrm, axis=1, keepdims=True)
            nrm = np.divide(nrm, norm, out=np.zeros_like(nrm), where=norm > 0)
        return cls(unpack(uniq), nrm)


def check_qp(qp) -> int:
    if int(qp) != qp or not (1 <= int(qp) <= 5):
        raise InvalidParameter(f"qp must be in 1..5, got {qp}")
    return int(qp)


@dataclass(frozen=True)
class CodingConfig:
    """One operating point: quality parameter, scaling factor, super-resolution flag."""

    qp: int
    sf: int = 1
    sr: bool = False

    def __post_init__(self):
        if not (1 <= int(self.qp) <= 5):
            raise InvalidParameter(f"qp must be in 1..5, got {self.qp}")
        _check_pow2(self.sf, "sf")

    def __str__(self):
        return f"{self.qp},{self.sf},{'T' if self.sr else 'F'}"

    @classmethod
    def parse(cls, text: str) -> "CodingConfig":
        parts = [p.strip() for p in text.split(",")]
        if len(parts) not in (2, 3):
            raise InvalidParameter(f"bad coding config {text!r}; expected 'qp,sf[,sr]'")
        sr = False
        if len(parts) == 3:
            flag = parts[2].upper()
            if flag not in ("T", "F", "TRUE", "FALSE", "1", "0"):
                raise InvalidParameter(f"bad sr flag {parts[2]!r}")
            sr = flag in ("T", "TRUE", "1")
        return cls(int(parts[0]), int(parts[1]), sr)


def parse_chain(text: str) -> list[CodingConfig]:
    """Parse ``"qp,sf,sr;qp,sf,sr;..."``."""
    return [CodingConfig.parse(item) for item in text.split(";") if item.strip()]


@dataclass
class Block:
    index: int
    origin: np.ndarray
    tensor: SparseTensor = field(repr=False)

    @property
    def global_coords(self) -> np.ndarray:
        return self.tensor.coords + self.origin


def downscale_coords(pc: PointCloud, sf: int) -> PointCloud:
    """Divide by ``sf`` and round half away from zero, then deduplicate."""
    _check_pow2(sf, "sf")
    if sf == 1:
        return PointCloud.from_points(pc.points)
    pts = round_half_away(pc.points / sf).astype(np.int64)
    return PointCloud.from_points(pts)


def upscale_coords(coords, factor: int) -> np.ndarray:
    _check_pow2(factor)
    c = as_coords(coords)
    out = c * int(factor)
    if out.size and out.max() >= COORD_LIMIT:
        raise RangeError("upscaled coordinates exceed the 21-bit range")
    return out


def split_blocks(pc: PointCloud, bs: int) -> list[Block]:
    """Partition into non-overlapping cubes of side ``bs``; ids follow Morton order."""
    _check_pow2(bs, "block size")
    pts = as_coords(pc.points)
    if len(pts) == 0:
        return []
    grid = pts // bs
    codes = _morton(grid)
    order = np.lexsort((pack(pts), codes))
    codes, pts, grid = codes[order], pts[order], grid[order]
    bounds = np.flatnonzero(np.diff(codes)) + 1
    blocks = []
    for seg_codes, seg_pts, seg_grid in zip(np.split(codes, bounds), np.split(pts, bounds), np.split(grid, bounds)):
        origin = seg_grid[0] * bs
        blocks.append(Block(int(seg_codes[0]), origin, SparseTensor.occupancy(seg_pts - origin)))
    return blocks


def merge_blocks(blocks) -> PointCloud:
    blocks = list(blocks)
    seen = set()
    parts = []
    for b in blocks:
        key = tuple(int(v) for v in b.origin)
        if key in seen:
            raise InvalidInput(f"overlapping block origin {key}")
        seen.add(key)
        parts.append(b.global_coords)
    if not parts:
        return PointCloud(np.zeros((0, 3), dtype=np.int64))
    return PointCloud.from_points(np.concatenate(parts))


# offsets in the order o = 4*i + 2*j + k, shared with the octree child bits
CHILD_OFFSETS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


def child_candidates_unsorted(coords) -> np.ndarray:
    """Children ``2c + o`` grouped per parent, offsets in child-bit order."""
    c = as_coords(coords)
    return (2 * c[:, None, :] + CHILD_OFFSETS[None]).reshape(-1, 3)


def child_candidates(coords) -> np.ndarray:
    """All 8 children of every coordinate on the 2x finer grid, sorted."""
    kids = child_candidates_unsorted(coords)
    if len(kids) == 0:
        return kids
    return unpack(np.sort(pack(check_coords(kids))))


def occupancy_labels(candidates, target_coords) -> np.ndarray:
    cand_keys = pack(candidates)
    tgt_keys = pack(target_coords)
    if len(tgt_keys):
        idx = lookup(cand_keys, tgt_keys)
        if np.any(idx < 0):
            missing = int(np.sum(idx < 0))
            raise StructuralMismatch(f"{missing} target coordinates are not among the candidates")
    return np.isin(cand_keys, tgt_keys).astype(np.int64)


def top_k_indices(keys, values, k: int) -> np.ndarray:
    """Row indices of the ``k`` largest values in rank order (ties: smaller key)."""
    return np.lexsort((np.asarray(keys), -np.asarray(values, dtype=np.float64)))[:k]


def top_k_select(tensor: SparseTensor, k: int) -> np.ndarray:
    """Coordinates of the ``k`` largest single-channel values (ties: smaller coord)."""
    n = len(tensor)
    if not (1 <= k <= n):
        raise InvalidParameter(f"k must be in [1, {n}], got {k}")
    order = top_k_indices(pack(tensor.coords), tensor.features[:, 0], k)
    return unpack(np.sort(pack(tensor.coords[order])))


def knn(queries, refs, k: int, chunk: int = 2048) -> np.ndarray:
    """Indices of the ``k`` nearest refs per query by squared distance.

    Ties go to the lower ref index.  When fewer than ``k`` refs exist, the
    nearest one is repeated to fill the row.
    """
    q = as_coords(queries)
    r = as_coords(refs)
    if len(r) == 0:
        raise InvalidInput("knn needs at least one reference point")
    kk = min(k, len(r))
    out = np.empty((len(q), k), dtype=np.int64)
    for lo in range(0, len(q), chunk):
        qc = q[lo:lo + chunk]
        d = ((qc[:, None, :] - r[None, :, :]) ** 2).sum(-1)
        idx = np.argsort(d, axis=1, kind="stable")[:, :kk]
        out[lo:lo + chunk, :kk] = idx
        if kk < k:
            out[lo:lo + chunk, kk:] = idx[:, :1]
    return out
