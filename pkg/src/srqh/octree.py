"""Breadth-first octree occupancy coding of latent coordinates.

One byte per occupied internal node; bit ``4*i + 2*j + k`` flags the child
at offset ``(i, j, k)``.  Nodes at each level are visited in Morton order,
which is exactly the order produced by expanding parents child-bit first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CorruptStream, RangeError, as_coords, morton_code, morton_decode, sort_unique


@dataclass(frozen=True)
class OctreeStream:
    depth: int
    occupancy_bytes: bytes

    def __len__(self):
        return len(self.occupancy_bytes)


def depth_for(extent: int) -> int:
    """Smallest depth >= 1 whose grid covers ``extent`` cells per axis."""
    return max(1, int(np.ceil(np.log2(max(int(extent), 1)))))


def octree_encode(coords, depth: int) -> OctreeStream:
    if depth < 1:
        raise ValueError("octree depth must be >= 1")
    c = as_coords(coords)
    if len(c) == 0:
        return OctreeStream(depth, b"")
    if c.min() < 0 or c.max() >= (1 << depth):
        raise RangeError(f"coordinates do not fit a depth-{depth} octree")
    codes = np.unique(morton_code(sort_unique(c)))
    out = []
    for level in range(depth):
        shift = 3 * (depth - level - 1)
        nodes = np.unique(codes >> shift)
        _, start = np.unique(nodes >> 3, return_index=True)
        bits = np.left_shift(1, nodes & 7).astype(np.uint8)
        occ = np.bitwise_or.reduceat(bits, start) if len(bits) else bits
        out.append(occ.astype(np.uint8))
    return OctreeStream(depth, np.concatenate(out).tobytes())


def octree_decode(stream: OctreeStream) -> np.ndarray:
    data = np.frombuffer(stream.occupancy_bytes, dtype=np.uint8)
    if len(data) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if np.any(data == 0):
        raise CorruptStream("octree node with no occupied child")
    nodes = np.zeros(1, dtype=np.int64)
    pos = 0
    for _ in range(stream.depth):
        n = len(nodes)
        if pos + n > len(data):
            raise CorruptStream("truncated octree stream")
        occ = data[pos:pos + n]
        pos += n
        # unpackbits with little bit order yields child bit b at column b
        bits = np.unpackbits(occ[:, None], axis=1, bitorder="little").astype(bool)
        parent, child = np.nonzero(bits)
        nodes = (nodes[parent] << 3) | child
    if pos != len(data):
        raise CorruptStream("trailing bytes after octree stream")
    return sort_unique(morton_decode(nodes))


def count_internal_nodes(coords, depth: int) -> int:
    """Independent tree walk: number of distinct occupied ancestors over all levels."""
    c = as_coords(coords)
    seen = set()
    for x, y, z in c.tolist():
        for level in range(depth):
            s = depth - level
            seen.add((level, x >> s, y >> s, z >> s))
    return len(seen)
