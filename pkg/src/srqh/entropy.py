"""rANS coding under fixed-point probability tables.

Probabilities are quantized to 16-bit frequency tables in which every symbol
gets at least one count, so the coder never meets a zero-probability symbol.
Models hand out table rows lazily in chunks to keep memory flat for long
streams with per-symbol distributions.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .core import CorruptStream, InvalidParameter, RangeError, round_half_away

log = logging.getLogger(__name__)

PRECISION = 16
TOTAL = 1 << PRECISION
SUPPORT = (-127, 128)
SIGMA_MIN = 0.01

_RANS_L = 1 << 23
_CHUNK = 4096


@dataclass
class CdfTable:
    precision_bits: int
    cdf: np.ndarray
    symbol_offset: int

    @property
    def alphabet(self) -> int:
        return len(self.cdf) - 1

    def prob(self, symbol: int) -> float:
        i = symbol - self.symbol_offset
        return float(self.cdf[i + 1] - self.cdf[i]) / (1 << self.precision_bits)


@dataclass
class GaussianParams:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape:
            raise InvalidParameter("mu and sigma must have the same shape")

    def __getitem__(self, i):
        return GaussianParams(self.mu[i], self.sigma[i])


@dataclass
class RansStream:
    payload: bytes
    symbol_count: int

    def to_bytes(self) -> bytes:
        return struct.pack("<II", self.symbol_count, len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, buf, offset: int = 0) -> tuple["RansStream", int]:
        if offset + 8 > len(buf):
            raise CorruptStream("truncated rANS header")
        count, length = struct.unpack_from("<II", buf, offset)
        offset += 8
        if offset + length > len(buf):
            raise CorruptStream("truncated rANS payload")
        return cls(bytes(buf[offset:offset + length]), count), offset + length

    def __len__(self):
        return 8 + len(self.payload)


def quantize_residuals(y, mu) -> np.ndarray:
    return round_half_away(np.asarray(y) - np.asarray(mu)).astype(np.int64)


def dequantize(mu, r) -> np.ndarray:
    return np.asarray(mu, dtype=np.float64) + np.asarray(r, dtype=np.float64)


def pmf_to_cdf(pmf: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Quantize pmf rows to integer CDF rows summing to ``2**precision``.

    Every bin gets ``1 + floor(p * (total - A))`` counts; the remainder goes to
    the first most probable bin.  Deterministic for identical float input.
    """
    pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    total = 1 << precision
    n, a = pmf.shape
    if a > total:
        raise InvalidParameter("alphabet larger than the probability precision")
    pmf = np.clip(pmf, 0.0, None)
    s = pmf.sum(1, keepdims=True)
    pmf = np.where(s > 0, pmf / np.where(s > 0, s, 1), 1.0 / a)
    freq = 1 + np.floor(pmf * (total - a)).astype(np.int64)
    rem = total - freq.sum(1)
    freq[np.arange(n), np.argmax(pmf, axis=1)] += rem
    cdf = np.zeros((n, a + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return cdf


def gaussian_pmf(mu, sigma, support=SUPPORT) -> np.ndarray:
    """Discretized Gaussian mass per integer bin, tails folded into the end bins."""
    smin, smax = support
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))[:, None]
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))[:, None]
    edges = np.arange(smin, smax, dtype=np.float64) + 0.5
    c = ndtr((edges[None, :] - mu) / sigma)
    c = np.concatenate([np.zeros((len(c), 1)), c, np.ones((len(c), 1))], axis=1)
    return np.diff(c, axis=1)


def _check_support(support):
    smin, smax = support
    if not (smin <= 0 <= smax) or smin >= smax:
        raise InvalidParameter(f"degenerate support {support}")


def build_gaussian_cdf(params: GaussianParams, support=SUPPORT, precision: int = PRECISION) -> CdfTable:
    _check_support(support)
    mu = float(np.asarray(params.mu).reshape(-1)[0])
    sigma = float(np.asarray(params.sigma).reshape(-1)[0])
    if sigma < SIGMA_MIN:
        raise InvalidParameter(f"sigma {sigma} below sigma_min {SIGMA_MIN}")
    cdf = pmf_to_cdf(gaussian_pmf(mu, sigma, support), precision)[0]
    return CdfTable(precision, cdf, support[0])


class SymbolModel:
    """Source of per-symbol CDF rows: ``rows(lo, hi)`` -> (hi-lo, A+1) ints."""

    offset: int = 0
    precision: int = PRECISION

    def __len__(self):
        raise NotImplementedError

    def rows(self, lo: int, hi: int) -> np.ndarray:
        raise NotImplementedError


class StaticModel(SymbolModel):
    """One shared table for ``n`` symbols."""

    def __init__(self, table: CdfTable, n: int):
        self.table, self.n = table, n
        self.offset, self.precision = table.symbol_offset, table.precision_bits

    def __len__(self):
        return self.n

    def rows(self, lo, hi):
        return np.broadcast_to(self.table.cdf, (hi - lo, len(self.table.cdf)))


class TableListModel(SymbolModel):
    """Explicit per-symbol tables (must share offset, alphabet, and precision)."""

    def __init__(self, tables):
        tables = list(tables)
        self.cdf = np.stack([t.cdf for t in tables]) if tables else np.zeros((0, 2), dtype=np.int64)
        if tables:
            self.offset, self.precision = tables[0].symbol_offset, tables[0].precision_bits

    def __len__(self):
        return len(self.cdf)

    def rows(self, lo, hi):
        return self.cdf[lo:hi]


class IndexedModel(SymbolModel):
    """Symbol ``i`` uses ``cdfs[index[i]]`` (e.g. a per-channel factorized prior)."""

    def __init__(self, cdfs: np.ndarray, index, offset: int = SUPPORT[0], precision: int = PRECISION):
        self.cdfs = np.asarray(cdfs, dtype=np.int64)
        self.index = np.asarray(index, dtype=np.int64).reshape(-1)
        self.offset, self.precision = offset, precision

    def __len__(self):
        return len(self.index)

    def rows(self, lo, hi):
        return self.cdfs[self.index[lo:hi]]


class GaussianModel(SymbolModel):
    def __init__(self, mu, sigma, support=SUPPORT, precision: int = PRECISION):
        _check_support(support)
        self.mu = np.asarray(mu, dtype=np.float64).reshape(-1)
        self.sigma = np.maximum(np.asarray(sigma, dtype=np.float64).reshape(-1), SIGMA_MIN)
        if self.mu.shape != self.sigma.shape:
            self.mu = np.broadcast_to(self.mu, self.sigma.shape)
        self.support = support
        self.offset, self.precision = support[0], precision

    def __len__(self):
        return len(self.sigma)

    def rows(self, lo, hi):
        return pmf_to_cdf(gaussian_pmf(self.mu[lo:hi], self.sigma[lo:hi], self.support), self.precision)


class BernoulliModel(SymbolModel):
    """Binary symbols with ``P(1) = p`` quantized to the coder precision."""

    def __init__(self, p, precision: int = PRECISION):
        self.p = np.asarray(p, dtype=np.float64).reshape(-1)
        self.precision = precision
        total = 1 << precision
        f1 = np.clip(np.round(self.p * total), 1, total - 1).astype(np.int64)
        self.cdf = np.stack([np.zeros_like(f1), total - f1, np.full_like(f1, total)], axis=1)

    def __len__(self):
        return len(self.p)

    def rows(self, lo, hi):
        return self.cdf[lo:hi]


def _as_model(cdfs, n: int) -> SymbolModel:
    if isinstance(cdfs, SymbolModel):
        return cdfs
    if isinstance(cdfs, CdfTable):
        return StaticModel(cdfs, n)
    return TableListModel(cdfs)


def _start_freq(symbols: np.ndarray, model: SymbolModel, lo: int, hi: int):
    rows = model.rows(lo, hi)
    idx = symbols[lo:hi] - model.offset
    a = rows.shape[1] - 1
    if np.any(idx < 0) or np.any(idx >= a):
        bad = int(np.flatnonzero((idx < 0) | (idx >= a))[0]) + lo
        raise RangeError(f"symbol {int(symbols[bad])} at position {bad} outside the model support")
    r = np.arange(hi - lo)
    start = rows[r, idx]
    return start, rows[r, idx + 1] - start


def rans_encode(symbols, cdfs) -> RansStream:
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    n = len(symbols)
    if n == 0:
        return RansStream(b"", 0)
    model = _as_model(cdfs, n)
    if len(model) < n:
        raise InvalidParameter("model covers fewer symbols than given")
    prec = model.precision
    out = bytearray()
    x = _RANS_L
    bound = (_RANS_L >> prec) << 8
    hi = n
    while hi > 0:
        lo = max(0, hi - _CHUNK)
        start, freq = _start_freq(symbols, model, lo, hi)
        for s, f in zip(start[::-1].tolist(), freq[::-1].tolist()):
            x_max = bound * f
            while x >= x_max:
                out.append(x & 0xFF)
                x >>= 8
            x = ((x // f) << prec) + (x % f) + s
        hi = lo
    out += x.to_bytes(4, "little")
    return RansStream(bytes(out), n)


def rans_decode(stream: RansStream, cdfs, n: int | None = None) -> np.ndarray:
    n = stream.symbol_count if n is None else n
    if n != stream.symbol_count:
        raise CorruptStream(f"expected {n} symbols, stream holds {stream.symbol_count}")
    data = stream.payload
    if n == 0:
        if data:
            raise CorruptStream("payload present for an empty stream")
        return np.zeros(0, dtype=np.int64)
    if len(data) < 4:
        raise CorruptStream("rANS payload shorter than the state flush")
    model = _as_model(cdfs, n)
    prec = model.precision
    mask = (1 << prec) - 1
    x = int.from_bytes(data[-4:], "little")
    pos = len(data) - 4
    out = np.empty(n, dtype=np.int64)
    for lo in range(0, n, _CHUNK):
        hi = min(n, lo + _CHUNK)
        rows = np.ascontiguousarray(model.rows(lo, hi))
        for i in range(hi - lo):
            row = rows[i]
            slot = x & mask
            j = int(np.searchsorted(row, slot, side="right")) - 1
            s = int(row[j])
            x = (int(row[j + 1]) - s) * (x >> prec) + slot - s
            while x < _RANS_L:
                pos -= 1
                if pos < 0:
                    raise CorruptStream("rANS state underflow")
                x = (x << 8) | data[pos]
            out[lo + i] = j + model.offset
    if x != _RANS_L or pos != 0:
        raise CorruptStream("rANS stream did not terminate cleanly")
    return out


def rate_estimate_bits(symbols, cdfs) -> float:
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    n = len(symbols)
    if n == 0:
        return 0.0
    model = _as_model(cdfs, n)
    bits = 0.0
    for lo in range(0, n, _CHUNK):
        hi = min(n, lo + _CHUNK)
        _, freq = _start_freq(symbols, model, lo, hi)
        bits += float(np.sum(model.precision - np.log2(freq)))
    return bits


def clamp_residuals(r, support=SUPPORT) -> np.ndarray:
    """Clip residuals to the coder support, warning when anything is clipped."""
    r = np.asarray(r, dtype=np.int64)
    clipped = np.clip(r, support[0], support[1])
    if np.any(clipped != r):
        log.warning("clamped %d residuals to the coder support %s", int(np.sum(clipped != r)), support)
    return clipped
