"""Sparse-tensor layers built on the autograd ops.

Layers are plain functions that pull their weights from a :class:`ParamStore`
by name, creating them on first use.  A :class:`STensor` couples integer
coordinates with a differentiable feature matrix and caches kernel maps so
stacked stride-1 convolutions on the same coordinates share them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import core
from ..core import InvalidInput, InvalidParameter
from . import autograd as ag
from .autograd import Tensor
from .params import ParamStore

OFFSETS_3 = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)
OFFSETS_1 = np.zeros((1, 3), dtype=np.int64)


@dataclass
class STensor:
    coords: np.ndarray
    feats: Tensor
    cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.feats = ag.as_tensor(self.feats)
        if len(self.feats.shape) == 1:
            self.feats = ag.reshape(self.feats, (-1, 1))
        if len(self.coords) != self.feats.shape[0]:
            raise InvalidInput("feature rows must match coordinates")

    def __len__(self):
        return len(self.coords)

    @property
    def keys(self) -> np.ndarray:
        if "keys" not in self.cache:
            self.cache["keys"] = core.pack(self.coords)
        return self.cache["keys"]

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def with_feats(self, feats) -> "STensor":
        return STensor(self.coords, feats, self.cache)

    def to_sparse(self) -> core.SparseTensor:
        return core.SparseTensor(self.coords, self.feats.data.copy())

    @classmethod
    def from_sparse(cls, st: core.SparseTensor) -> "STensor":
        return cls(st.coords, Tensor(st.features))


@dataclass(frozen=True)
class SparseConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    transposed: bool = False

    def __post_init__(self):
        if self.kernel_size not in (1, 3):
            raise InvalidParameter("kernel_size must be 1 or 3")
        if self.stride not in (1, 2):
            raise InvalidParameter("stride must be 1 or 2")
        if self.transposed and self.stride != 2:
            raise InvalidParameter("transposed convolutions are generative stride-2 only")

    @property
    def offsets(self) -> np.ndarray:
        return OFFSETS_3 if self.kernel_size == 3 else OFFSETS_1

    @property
    def weight_shape(self) -> tuple:
        taps = 8 if self.transposed else len(self.offsets)
        return (taps, self.in_channels, self.out_channels)


def downsample_coords(coords) -> np.ndarray:
    """Output grid of a stride-2 convolution: unique ``floor(c / 2)``."""
    c = core.as_coords(coords)
    if len(c) == 0:
        return c
    return core.unpack(np.unique(core.pack(c >> 1)))


def kernel_map(in_coords, in_keys, out_coords, offsets, stride: int):
    """Taps ``(k, in_idx, out_idx)`` linking output ``p`` to input ``stride*p + o``."""
    maps = []
    base = stride * core.as_coords(out_coords)
    for k, o in enumerate(offsets):
        q = base + o
        ok = np.all((q >= 0) & (q < core.COORD_LIMIT), axis=1)
        out_idx = np.flatnonzero(ok)
        idx = core.lookup(in_keys, core.pack(q[ok]))
        hit = idx >= 0
        if np.any(hit):
            maps.append((k, idx[hit], out_idx[hit]))
    return maps


def sparse_conv(x: STensor, spec: SparseConvSpec, weight: Tensor, bias: Tensor | None = None) -> STensor:
    if x.channels != spec.in_channels or tuple(weight.shape) != spec.weight_shape:
        raise InvalidParameter(
            f"conv expects {spec.in_channels} channels / weights {spec.weight_shape}, "
            f"got {x.channels} / {tuple(weight.shape)}"
        )
    if spec.transposed:
        return sparse_deconv(x, spec, weight, bias)
    key = ("map", spec.stride, spec.kernel_size)
    if spec.stride == 1:
        out_coords, cache = x.coords, x.cache
    else:
        ckey = ("down",)
        if ckey not in x.cache:
            dc = downsample_coords(x.coords)
            x.cache[ckey] = (dc, {"keys": core.pack(dc)})
        out_coords, cache = x.cache[ckey]
    if key not in x.cache:
        x.cache[key] = kernel_map(x.coords, x.keys, out_coords, spec.offsets, spec.stride)
    y = ag.sparse_conv_op(x.feats, weight, x.cache[key], len(out_coords))
    if bias is not None:
        y = ag.add(y, bias)
    return STensor(out_coords, y, cache)


def sparse_deconv(x: STensor, spec: SparseConvSpec, weight: Tensor, bias: Tensor | None = None) -> STensor:
    """Generative upsampling: every input spawns its 8 children ``2c + o``."""
    if x.channels != spec.in_channels or tuple(weight.shape) != (8, spec.in_channels, spec.out_channels):
        raise InvalidParameter("deconv channel/weight mismatch")
    key = ("children",)
    if key not in x.cache:
        raw = core.child_candidates_unsorted(x.coords)
        keys = core.pack(raw)
        perm = np.argsort(keys, kind="stable")
        x.cache[key] = (raw[perm], keys[perm], perm)
    coords, keys, perm = x.cache[key]
    y = ag.expand_children_op(x.feats, weight, perm)
    if bias is not None:
        y = ag.add(y, bias)
    return STensor(coords, y, {"keys": keys})


def select(x: STensor, idx) -> STensor:
    """Row subset; ``idx`` must be increasing so coordinates stay sorted."""
    idx = np.asarray(idx, dtype=np.int64)
    return STensor(x.coords[idx], ag.take_rows(x.feats, idx), {"keys": x.keys[idx]})


def restrict_to(x: STensor, coords) -> STensor:
    """Rows of ``x`` at ``coords`` (all must be present)."""
    idx = core.lookup(x.keys, core.pack(coords))
    if np.any(idx < 0):
        raise core.StructuralMismatch("requested coordinates are not produced by this tensor")
    return STensor(core.as_coords(coords), ag.take_rows(x.feats, idx), {"keys": core.pack(coords)})


def relu(x: STensor) -> STensor:
    return x.with_feats(ag.relu(x.feats))


# --------------------------------------------------------------- parameterized
def conv(ps: ParamStore, name: str, x: STensor, cin: int, cout: int, *, ksize=3, stride=1, bias=True) -> STensor:
    spec = SparseConvSpec(cin, cout, ksize, stride)
    w = ps.get(f"{name}.w", spec.weight_shape)
    b = ps.get(f"{name}.b", (cout,), init="zeros") if bias else None
    return sparse_conv(x, spec, w, b)


def deconv(ps: ParamStore, name: str, x: STensor, cin: int, cout: int, bias=True) -> STensor:
    spec = SparseConvSpec(cin, cout, 3, 2, transposed=True)
    w = ps.get(f"{name}.w", spec.weight_shape, fan_in=cin)
    b = ps.get(f"{name}.b", (cout,), init="zeros") if bias else None
    return sparse_deconv(x, spec, w, b)


def dense(ps: ParamStore, name: str, x, cin: int, cout: int, bias=True, w_init="he", b_init="zeros") -> Tensor:
    w = ps.get(f"{name}.w", (cin, cout), init=w_init)
    b = ps.get(f"{name}.b", (cout,), init=b_init) if bias else None
    return ag.linear(x, w, b)


def mlp_forward(ps: ParamStore, name: str, x, sizes) -> Tensor:
    """Affine + ReLU stack over ``sizes = [in, h1, ..., out]``; last layer linear."""
    x = ag.as_tensor(x)
    if x.shape[-1] != sizes[0]:
        raise InvalidParameter(f"mlp {name} expects width {sizes[0]}, got {x.shape[-1]}")
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        x = dense(ps, f"{name}.{i}", x, a, b)
        if i < len(sizes) - 2:
            x = ag.relu(x)
    return x


def inception_resnet(ps: ParamStore, name: str, x: STensor, c: int) -> STensor:
    """Two-branch residual block: (1x1 -> 3x3) and (3x3 -> 3x3), concatenated, added to input."""
    q, h = max(c // 4, 1), c // 2
    a = relu(conv(ps, f"{name}.a0", x, c, q, ksize=1))
    a = conv(ps, f"{name}.a1", a, q, h)
    b = relu(conv(ps, f"{name}.b0", x, c, q))
    b = conv(ps, f"{name}.b1", b, q, c - h)
    return x.with_feats(ag.add(x.feats, ag.concat([a.feats, b.feats], axis=1)))


def vector_attention(ps: ParamStore, name: str, ya: STensor, yb: STensor, width: int, k: int = 5,
                     ref_coords=None, query_coords=None, return_weights=False):
    """Vector (per-channel) attention of queries from ``yb`` over kNN keys/values from ``ya``.

    Output keeps ``yb``'s coordinates and width: ``yb + Linear(sum_n w_n * (V_n + pos_n))``
    with ``w = softmax_n(MLP(Q - K_n + pos_n))`` taken independently per channel.
    ``ref_coords`` / ``query_coords`` override the coordinates used for
    neighbor search and positions (e.g. lifted source coordinates).
    """
    if len(ya) == 0:
        raise InvalidInput("attention needs a non-empty key/value tensor")
    ca, cb = ya.channels, yb.channels
    rc = ya.coords if ref_coords is None else ref_coords
    qc = yb.coords if query_coords is None else query_coords
    nbr = core.knn(qc, rc, k)
    rel = (qc[:, None, :] - rc[nbr]).astype(np.float64)
    q = dense(ps, f"{name}.q", yb.feats, cb, width)
    kk = dense(ps, f"{name}.k", ya.feats, ca, width)
    v = dense(ps, f"{name}.v", ya.feats, ca, width)
    pos = mlp_forward(ps, f"{name}.pos", Tensor(rel), [3, width, width])
    kn = ag.take_rows(kk, nbr)
    vn = ag.take_rows(v, nbr)
    rel_qk = ag.add(ag.sub(ag.reshape(q, (len(qc), 1, width)), kn), pos)
    logits = mlp_forward(ps, f"{name}.w", rel_qk, [width, width, width])
    weights = ag.softmax(logits, axis=1)
    agg = ag.tsum(ag.mul(weights, ag.add(vn, pos)), axis=1)
    upd = dense(ps, f"{name}.o", agg, width, cb)
    out = yb.with_feats(ag.add(yb.feats, upd))
    return (out, weights.data) if return_weights else out
