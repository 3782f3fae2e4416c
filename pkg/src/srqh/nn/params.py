"""Named weight storage, binary serialization, and the Adam optimizer."""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict

import numpy as np

from ..core import CorruptStream
from .autograd import Tensor

MAGIC = b"TNPS"
VERSION = 1


class ParamStore:
    """Ordered map of name -> trainable :class:`Tensor`.

    Initialization draws from one generator seeded by ``rng_seed``, so the same
    creation order always yields identical weights.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = ""):
        return [n for n in self._params if n.startswith(prefix)]

    def add(self, name: str, value) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def get(self, name: str, shape, init: str = "he", fan_in: int | None = None) -> Tensor:
        """Fetch ``name`` or create it with He-uniform, zero, or callable init."""
        if name in self._params:
            t = self._params[name]
            if t.shape != tuple(shape):
                raise ValueError(f"parameter {name} has shape {t.shape}, expected {tuple(shape)}")
            return t
        if callable(init):
            value = np.asarray(init(shape), dtype=np.float64)
        elif init == "zeros":
            value = np.zeros(shape)
        else:
            fan = fan_in if fan_in is not None else int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / max(fan, 1))
            value = self.rng.uniform(-bound, bound, size=shape)
        return self.add(name, value)

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in self._params.items()}

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items() if n.startswith(prefix)}

    def load_state(self, state: dict, prefix_from: str = "", prefix_to: str = ""):
        for n, v in state.items():
            if not n.startswith(prefix_from):
                continue
            new = prefix_to + n[len(prefix_from):]
            if new in self._params:
                self._params[new].data = np.array(v, dtype=np.float64)
            else:
                self.add(new, v)

    def copy_prefix(self, src: str, dst: str):
        self.load_state(self.state(src), src, dst)

    # -- serialization ------------------------------------------------------
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<HI", VERSION, len(self._params)))
        for name, t in self._params.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", t.data.ndim))
            buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, rng_seed: int = 0) -> "ParamStore":
        if data[:4] != MAGIC:
            raise CorruptStream("not a parameter file")
        version, count = struct.unpack_from("<HI", data, 4)
        if version != VERSION:
            raise CorruptStream(f"unsupported parameter file version {version}")
        pos = 10
        store = cls(rng_seed)
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", data, pos)
                pos += 2
                name = data[pos:pos + nlen].decode("utf-8")
                pos += nlen
                (rank,) = struct.unpack_from("<B", data, pos)
                pos += 1
                dims = struct.unpack_from(f"<{rank}I", data, pos)
                pos += 4 * rank
                size = int(np.prod(dims)) if rank else 1
                arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims)
                pos += 8 * size
                store.add(name, arr.astype(np.float64))
        except (struct.error, ValueError) as exc:
            raise CorruptStream(f"truncated parameter file: {exc}") from exc
        return store

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


class Scope:
    """View of a store that prefixes every requested name."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store, self.prefix = store, prefix

    def get(self, name, shape, init="he", fan_in=None) -> Tensor:
        return self.store.get(self.prefix + name, shape, init, fan_in)

    def scope(self, prefix: str) -> "Scope":
        return Scope(self.store, self.prefix + prefix)


class Adam:
    def __init__(self, params: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, prefix: str = ""):
        self.params, self.prefix = params, prefix
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if not name.startswith(self.prefix) or p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_step(params: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, state: Adam | None = None) -> Adam:
    """One Adam update; pass the returned state back in for subsequent steps."""
    if state is None:
        state = Adam(params, lr, beta1, beta2, eps)
    state.lr = lr
    state.step()
    return state


class PlateauSchedule:
    """Learning-rate decay on a stalled validation loss, with early stopping.

    After ``patience`` epochs without improvement the rate is multiplied by
    ``factor`` (then the patience window restarts); after ``stop_after``
    epochs without improvement :attr:`stop` becomes true.
    """

    def __init__(self, lr=1e-3, factor=0.1, patience=7, stop_after=10, min_delta=0.0):
        self.lr, self.factor, self.patience, self.stop_after = lr, factor, patience, stop_after
        self.min_delta = min_delta
        self.best = np.inf
        self.stagnant = 0
        self._since_decay = 0
        self.stop = False

    def update(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.stagnant = 0
            self._since_decay = 0
        else:
            self.stagnant += 1
            self._since_decay += 1
            if self._since_decay >= self.patience:
                self.lr *= self.factor
                self._since_decay = 0
            if self.stagnant >= self.stop_after:
                self.stop = True
        return self.lr


def pack_with_meta(store: ParamStore, meta: dict) -> bytes:
    """Serialize weights plus a JSON metadata blob stored as a ``meta/json`` tensor."""
    out = ParamStore(store.rng_seed)
    for name, t in store.items():
        out.add(name, t.data)
    blob = json.dumps(meta, sort_keys=True).encode()
    out.add("meta/json", np.frombuffer(blob, dtype=np.uint8).astype(np.float64))
    return out.to_bytes()


def unpack_with_meta(data: bytes) -> tuple[ParamStore, dict]:
    raw = ParamStore.from_bytes(data)
    store, meta = ParamStore(raw.rng_seed), {}
    for name, t in raw.items():
        if name == "meta/json":
            meta = json.loads(t.data.astype(np.uint8).tobytes().decode())
        else:
            store.add(name, t.data)
    return store, meta
