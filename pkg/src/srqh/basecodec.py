"""Toy learned geometry codec: the base layer of a scalable stream.

A block of occupied voxels passes through an analysis transform (three
stride-2 sparse convolutions) to latents ``y`` on an 8x coarser grid.  A
hyper-analysis yields hyper-latents ``z`` coded under a per-channel
histogram prior; the hyper-synthesis predicts a Gaussian ``(mu, sigma)``
for every latent element, under which the rounded residuals are rANS coded.
The latent coordinates travel as an octree.  The synthesis transform grows
the latents back through three generative stages and the decoder keeps the
``k`` most probable voxels, with ``k`` chosen by the encoder.

Five models (qp 1..5) are trained one after another, each initialized from
the previous one so their latent spaces stay aligned.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import core, entropy, octree
from .core import Block, InvalidInput, InvalidParameter, SparseTensor
from .entropy import SUPPORT, GaussianParams, RansStream
from .nn import autograd as ag
from .nn import layers as L
from .nn.autograd import Tensor, no_grad
from .nn.layers import STensor
from .nn.params import Adam, ParamStore, pack_with_meta, unpack_with_meta

log = logging.getLogger(__name__)

C_Y = 32
C_Z = 16
STRIDE = 8
HYPER_STRIDE = 4
LAMBDAS = {1: 0.05, 2: 0.025, 3: 0.01, 4: 0.005, 5: 0.0025}
QPS = (1, 2, 3, 4, 5)
BASE_LR = 3e-3
FOCAL_ALPHA = 0.75
FOCAL_GAMMA = 2.0
K_GRID = 32
_NA = SUPPORT[1] - SUPPORT[0] + 1


class TrainingDiverged(RuntimeError):
    pass


# ----------------------------------------------------------------- models
@dataclass
class BaseModels:
    """Weights for the five qp models plus training metadata.

    Weights live in one :class:`ParamStore` under ``qp<N>/`` prefixes; the
    metadata (lambda per qp, checkpoint chaining, rate normalization) is
    serialized alongside as a JSON blob.
    """

    params: ParamStore
    lambdas: dict = field(default_factory=lambda: dict(LAMBDAS))
    meta: dict = field(default_factory=dict)

    def scope(self, qp: int):
        core.check_qp(qp)
        return self.params.scope(f"qp{qp}/")

    def trained_qps(self):
        return sorted({int(n.split("/")[0][2:]) for n in self.params if n.startswith("qp")})

    def to_bytes(self) -> bytes:
        return pack_with_meta(self.params, {"lambdas": self.lambdas, "meta": self.meta})

    @classmethod
    def from_bytes(cls, data: bytes) -> "BaseModels":
        params, info = unpack_with_meta(data)
        lambdas = {int(k): float(v) for k, v in info.get("lambdas", LAMBDAS).items()}
        return cls(params, lambdas, info.get("meta", {}))

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "BaseModels":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def init_models(seed: int = 0, qps=QPS) -> BaseModels:
    """Fresh weights for the listed qps, created in a fixed order from ``seed``."""
    models = BaseModels(ParamStore(seed))
    probe = core.as_coords([[0, 0, 0]])
    for qp in qps:
        _build(models.scope(qp), probe)
    return models


def _build(s, coords):
    """Run every sub-network once so all parameters exist."""
    with no_grad():
        x = STensor(coords, np.ones((len(coords), 1)))
        y = g_a(s, x)
        z = h_a(s, y)
        h_s(s, z.with_feats(ag.ste_round(z.feats)), y.coords)
        g_s(s, y)
        prior_logits(s)


# ----------------------------------------------------------------- transforms
def g_a(s, x: STensor) -> STensor:
    h = L.relu(L.conv(s, "ga.c0", x, 1, 16, stride=2))
    h = L.inception_resnet(s, "ga.r0", h, 16)
    h = L.relu(L.conv(s, "ga.c1", h, 16, 32, stride=2))
    h = L.inception_resnet(s, "ga.r1", h, 32)
    h = L.conv(s, "ga.c2", h, 32, C_Y, stride=2)
    return L.inception_resnet(s, "ga.r2", h, C_Y)


def h_a(s, y: STensor) -> STensor:
    h = L.relu(L.conv(s, "ha.c0", y, C_Y, C_Z, stride=2))
    return L.conv(s, "ha.c1", h, C_Z, C_Z, stride=2)


def h_s(s, zhat: STensor, y_coords) -> tuple[Tensor, Tensor]:
    """Gaussian parameters on exactly ``y_coords`` from quantized hyper-latents."""
    mid = L.downsample_coords(y_coords)
    out = []
    for head in ("mu", "sigma"):
        h = L.deconv(s, f"hs.{head}.d0", zhat, C_Z, C_Z)
        h = L.relu(L.restrict_to(h, mid))
        h = L.deconv(s, f"hs.{head}.d1", h, C_Z, C_Y)
        out.append(L.restrict_to(h, y_coords).feats)
    mu, raw = out
    sigma = ag.add(ag.softplus(raw), entropy.SIGMA_MIN)
    return mu, sigma


def prior_logits(s) -> Tensor:
    return s.get("prior.logits", (C_Z, _NA), init=_laplace_logits)


def _laplace_logits(shape):
    # a peaked start trains faster than a flat histogram
    grid = np.arange(SUPPORT[0], SUPPORT[1] + 1, dtype=np.float64)
    return np.broadcast_to(-np.abs(grid) / 2.0, shape).copy()


def prior_cdfs(s) -> np.ndarray:
    logits = prior_logits(s).data
    p = np.exp(logits - logits.max(1, keepdims=True))
    return entropy.pmf_to_cdf(p / p.sum(1, keepdims=True))


@dataclass
class Synthesis:
    """Output of the synthesis transform.

    ``stages`` holds ``(coords, probs)`` for every scale (probs as tensors so
    training can attach losses); ``coords`` / ``probs`` are the final dense
    candidate set and its occupancy probabilities.
    """

    stages: list
    coords: np.ndarray
    probs: np.ndarray


def _prune_count(p: np.ndarray) -> int:
    return int(min(max(math.ceil(2.0 * float(p.sum())), 1), len(p)))


def g_s(s, yhat: STensor, truth: list | None = None) -> Synthesis:
    """Three generative stages from stride 8 to stride 1.

    ``truth`` (training only) lists the occupied coordinates at strides 4, 2,
    1; true voxels then always survive pruning so every scale sees them.
    """
    widths = [(C_Y, 32), (32, 16), (16, 16)]
    h = yhat
    stages = []
    for i, (cin, cout) in enumerate(widths):
        h = L.relu(L.deconv(s, f"gs.d{i}", h, cin, cout))
        h = L.inception_resnet(s, f"gs.r{i}", h, cout)
        p = ag.sigmoid(L.conv(s, f"gs.p{i}", h, cout, 1, ksize=1).feats)
        p = ag.reshape(p, (-1,))
        stages.append((h.coords, p))
        if i == len(widths) - 1:
            break
        n = _prune_count(p.data)
        idx = core.top_k_indices(h.keys, p.data, n)
        if truth is not None:
            hit = core.lookup(h.keys, core.pack(truth[i]))
            idx = np.union1d(idx, hit[hit >= 0])
        h = L.select(h, np.sort(idx))
    return Synthesis(stages, stages[-1][0], stages[-1][1].data)


# ----------------------------------------------------------------- inference ops
def _occupancy(block) -> STensor:
    coords = block.tensor.coords if isinstance(block, Block) else core.as_coords(block)
    return STensor(coords, np.ones((len(coords), 1)))


def analysis(models: BaseModels, x, qp: int) -> SparseTensor:
    """Latents of a block on its stride-8 grid (empty block -> empty tensor)."""
    x = _occupancy(x)
    if len(x) == 0:
        return SparseTensor(np.zeros((0, 3), dtype=np.int64), np.zeros((0, C_Y)))
    with no_grad():
        return g_a(models.scope(qp), x).to_sparse()


def hyper_coords(y_coords) -> np.ndarray:
    """Hyper-latent grid, derivable from the latent coordinates alone."""
    return L.downsample_coords(L.downsample_coords(y_coords))


def hyper_analysis(models: BaseModels, y: SparseTensor, qp: int) -> SparseTensor:
    if len(y.coords) == 0:
        raise InvalidInput("hyper analysis needs non-empty latents")
    with no_grad():
        return h_a(models.scope(qp), STensor.from_sparse(y)).to_sparse()


def hyper_synthesis(models: BaseModels, zhat: SparseTensor, y_coords, qp: int) -> GaussianParams:
    with no_grad():
        mu, sigma = h_s(models.scope(qp), STensor.from_sparse(zhat), core.as_coords(y_coords))
    return GaussianParams(mu.data, sigma.data)


def synthesize(models: BaseModels, yhat: SparseTensor, qp: int) -> Synthesis:
    with no_grad():
        return g_s(models.scope(qp), STensor.from_sparse(yhat))


def select_top_k(syn: Synthesis, k: int) -> np.ndarray:
    n = len(syn.coords)
    if k > n:
        log.warning("k=%d exceeds %d candidates; clamping", k, n)
        k = n
    idx = core.top_k_indices(core.pack(syn.coords), syn.probs, k)
    return syn.coords[np.sort(idx)]


def optimize_k(coords, probs, original) -> int:
    """Number of most probable candidates minimizing symmetric D1 MSE to ``original``.

    Evaluated on a geometric grid of 32 values of k, then refined between the
    best grid point's neighbours: exhaustively when that bracket holds at
    most 256 values, else by a shrinking pattern search.
    """
    coords = core.as_coords(coords)
    original = core.as_coords(original)
    probs = np.asarray(probs, dtype=np.float64)
    n = len(coords)
    if n == 0:
        raise InvalidInput("optimize_k needs candidates")
    if len(original) == 0:
        return 1
    order = core.top_k_indices(core.pack(coords), probs, n)
    ranked = coords[order].astype(np.float64)
    orig_f = original.astype(np.float64)
    d_rec, _ = cKDTree(orig_f).query(ranked)
    rec_cum = np.cumsum(d_rec * d_rec)
    cache = {}

    def mse(k):
        if k not in cache:
            d_ref, _ = cKDTree(ranked[:k]).query(orig_f)
            cache[k] = max(rec_cum[k - 1] / k, float(np.mean(d_ref * d_ref)))
        return cache[k]

    grid = k_grid(n)
    vals = [mse(int(k)) for k in grid]
    b = int(np.argmin(vals))
    lo = int(grid[b - 1]) if b > 0 else 1
    hi = int(grid[b + 1]) if b + 1 < len(grid) else n
    if hi - lo + 1 <= 256:
        cand = range(lo, hi + 1)
        return min(cand, key=lambda k: (mse(k), k))
    best, step = int(grid[b]), max((hi - lo) // 4, 1)
    while step >= 1:
        moved = False
        for k in (best - step, best + step):
            if lo <= k <= hi and (mse(k), k) < (mse(best), best):
                best, moved = k, True
        if not moved:
            step //= 2
    return best


def k_grid(n: int) -> np.ndarray:
    return np.unique(np.round(np.geomspace(1, n, K_GRID)).astype(np.int64))


# ----------------------------------------------------------------- block coding
@dataclass
class BlockRecord:
    index: int
    k: int
    coords_stream: octree.OctreeStream
    hyper_stream: RansStream
    latent_stream: RansStream

    @property
    def nbytes(self) -> int:
        return len(self.coords_stream.occupancy_bytes) + 1 + len(self.hyper_stream) + len(self.latent_stream)


@dataclass
class BlockEncoding:
    """Encoder-side view of one coded block (what the decoder will rebuild)."""

    record: BlockRecord
    yhat: SparseTensor
    recon: np.ndarray
    bits: dict


def code_latents(y: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> tuple[np.ndarray, RansStream]:
    """Quantize ``y`` against ``mu`` and rANS code the residuals under N(0, sigma)."""
    r = entropy.clamp_residuals(entropy.quantize_residuals(y, mu))
    stream = entropy.rans_encode(r.reshape(-1), entropy.GaussianModel(0.0, sigma.reshape(-1)))
    return entropy.dequantize(mu, r), stream


def decode_latents(stream: RansStream, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    r = entropy.rans_decode(stream, entropy.GaussianModel(0.0, sigma.reshape(-1)), mu.size)
    return entropy.dequantize(mu, r.reshape(mu.shape))


def latent_bits_estimate(y, mu, sigma) -> float:
    r = entropy.clamp_residuals(entropy.quantize_residuals(y, mu)).reshape(-1)
    return entropy.rate_estimate_bits(r, entropy.GaussianModel(0.0, np.asarray(sigma).reshape(-1)))


def _prior_model(models, qp, n_z):
    return entropy.IndexedModel(prior_cdfs(models.scope(qp)), np.tile(np.arange(C_Z), n_z))


@dataclass
class LatentCoding:
    """The three entropy-coded streams of a block and the ŷ they decode to."""

    coords_stream: octree.OctreeStream
    hyper_stream: RansStream
    latent_stream: RansStream
    yhat: SparseTensor

    @property
    def nbytes(self) -> int:
        return len(self.coords_stream.occupancy_bytes) + 1 + len(self.hyper_stream) + len(self.latent_stream)


def code_block_latents(models: BaseModels, xc, qp: int) -> LatentCoding:
    """Analysis, hyperprior and entropy coding of one block (no synthesis)."""
    y = analysis(models, xc, qp)
    coords_stream = octree.octree_encode(y.coords, octree.depth_for(int(y.coords.max()) + 1))
    z = hyper_analysis(models, y, qp)
    zq = entropy.clamp_residuals(core.round_half_away(z.features).astype(np.int64))
    hyper_stream = entropy.rans_encode(zq.reshape(-1), _prior_model(models, qp, len(zq)))
    g = hyper_synthesis(models, SparseTensor(z.coords, zq.astype(np.float64)), y.coords, qp)
    yhat_f, latent_stream = code_latents(y.features, g.mu, g.sigma)
    return LatentCoding(coords_stream, hyper_stream, latent_stream, SparseTensor(y.coords, yhat_f))


def finish_block(models: BaseModels, lc: LatentCoding, xc, qp: int, index: int = 0,
                 k: int | None = None) -> BlockEncoding:
    """Synthesize from ŷ, choose k (unless given) and assemble the record."""
    syn = synthesize(models, lc.yhat, qp)
    if k is None:
        k = optimize_k(syn.coords, syn.probs, xc)
    rec = BlockRecord(index, int(k), lc.coords_stream, lc.hyper_stream, lc.latent_stream)
    bits = {"coords": 8 * (len(lc.coords_stream.occupancy_bytes) + 1),
            "hyper": 8 * len(lc.hyper_stream), "latents": 8 * len(lc.latent_stream)}
    return BlockEncoding(rec, lc.yhat, select_top_k(syn, rec.k), bits)


def encode_block_base(models: BaseModels, x, qp: int, index: int = 0, k: int | None = None) -> BlockEncoding:
    """Code one non-empty block; returns the record plus encoder-side ŷ and reconstruction."""
    xc = x.tensor.coords if isinstance(x, Block) else core.as_coords(x)
    if len(xc) == 0:
        raise InvalidInput("cannot code an empty block")
    return finish_block(models, code_block_latents(models, xc, qp), xc, qp, index, k)


def decode_latents_base(models: BaseModels, rec: BlockRecord, qp: int) -> SparseTensor:
    """Rebuild ŷ from a base record (octree coords, hyper stream, latent stream)."""
    y_coords = octree.octree_decode(rec.coords_stream)
    zc = hyper_coords(y_coords)
    zq = entropy.rans_decode(rec.hyper_stream, _prior_model(models, qp, len(zc)), len(zc) * C_Z)
    zhat = SparseTensor(zc, zq.reshape(len(zc), C_Z).astype(np.float64))
    g = hyper_synthesis(models, zhat, y_coords, qp)
    return SparseTensor(y_coords, decode_latents(rec.latent_stream, g.mu, g.sigma))


def decode_block_base(models: BaseModels, rec: BlockRecord, qp: int) -> tuple[Synthesis, np.ndarray]:
    """Occupancy probabilities over the candidate voxels and the top-k selection."""
    if rec.k < 1:
        raise InvalidParameter("k must be at least 1")
    yhat = decode_latents_base(models, rec, qp)
    syn = synthesize(models, yhat, qp)
    return syn, select_top_k(syn, rec.k)


# ----------------------------------------------------------------- training
def stride_truth(coords) -> list:
    """Occupied coordinates at strides 4, 2, 1 (targets of the synthesis stages)."""
    c = core.as_coords(coords)
    return [core.sort_unique(c >> 2), core.sort_unique(c >> 1), c]


def block_loss(s, coords, lam: float, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA) -> tuple[Tensor, dict]:
    """Rate-distortion loss of one block: summed per-scale focal loss + lambda * bits / points."""
    coords = core.as_coords(coords)
    x = STensor(coords, np.ones((len(coords), 1)))
    y = g_a(s, x)
    z = h_a(s, y)
    zq = ag.ste_round(z.feats)
    mu, sigma = h_s(s, z.with_feats(zq), y.coords)
    bits_y = ag.tsum(ag.gaussian_bits_op(y.feats, mu, sigma))
    # histogram prior: index the (clipped) integer symbol's log-probability
    logp = ag.log_softmax(prior_logits(s), axis=1)
    sym = np.clip(zq.data, SUPPORT[0], SUPPORT[1]).astype(np.int64) - SUPPORT[0]
    flat = np.arange(C_Z)[None, :] * _NA + sym
    bits_z = ag.mul(ag.tsum(ag.take_rows(ag.reshape(logp, (-1,)), flat)), -1.0 / np.log(2.0))
    # decoder sees mu + round(y - mu); straight-through on the residual
    yhat = ag.add(mu, ag.ste_round(ag.sub(y.feats, mu)))
    syn = g_s(s, y.with_feats(yhat), truth=stride_truth(coords))
    dist = None
    for (c, p), t in zip(syn.stages, stride_truth(coords)):
        lab = core.lookup(core.pack(t), core.pack(c)) >= 0
        f = ag.focal_loss_op(p, lab, alpha, gamma)
        dist = f if dist is None else ag.add(dist, f)
    rate = ag.mul(ag.add(bits_y, bits_z), 1.0 / len(coords))
    loss = ag.add(dist, ag.mul(rate, lam))
    return loss, {"loss": loss.item(), "dist": dist.item(), "bpp": rate.item()}


def _train_one(models, qp, blocks, epochs, lr, batch, rng, history, label):
    s = models.scope(qp)
    opt = Adam(models.params, lr=lr, prefix=f"qp{qp}/")
    lam = models.lambdas[qp]
    for epoch in range(epochs):
        order = rng.permutation(len(blocks))
        tot = {"loss": 0.0, "dist": 0.0, "bpp": 0.0}
        for start in range(0, len(order), batch):
            models.params.zero_grad()
            chunk = order[start:start + batch]
            for i in chunk:
                loss, info = block_loss(s, blocks[i], lam)
                if not np.isfinite(info["loss"]):
                    raise TrainingDiverged(f"non-finite loss at qp={qp} epoch={epoch} block={int(i)}")
                ag.mul(loss, 1.0 / len(chunk)).backward()
                for key in tot:
                    tot[key] += info[key]
            opt.step()
        row = {"qp": qp, "epoch": epoch, "lr": lr, "phase": label}
        row.update({key: v / len(blocks) for key, v in tot.items()})
        history.append(row)
        log.info("qp=%d epoch=%d loss=%.4f dist=%.4f bpp=%.3f", qp, epoch, row["loss"], row["dist"], row["bpp"])


def train_sequential(blocks, epochs_first: int = 20, epochs_next: int = 8, seed: int = 0,
                     mode: str = "sequential", lr: float = BASE_LR, batch: int = 4,
                     lambdas: dict | None = None, history: list | None = None) -> BaseModels:
    """Train the five qp models.

    ``sequential`` trains qp 5 (smallest lambda) from scratch, then each lower
    qp starting from the previous checkpoint.  ``independent`` trains every qp
    from its own fresh seed for ``epochs_first`` epochs.
    """
    if mode not in ("sequential", "independent"):
        raise InvalidParameter(f"unknown training mode {mode!r}")
    blocks = [core.as_coords(b.tensor.coords if isinstance(b, Block) else b) for b in blocks]
    blocks = [b for b in blocks if len(b)]
    if not blocks:
        raise InvalidInput("training corpus has no non-empty blocks")
    history = [] if history is None else history
    lambdas = dict(LAMBDAS if lambdas is None else lambdas)
    models = BaseModels(ParamStore(seed), lambdas,
                        {"mode": mode, "seed": seed, "rate_norm": "input_points", "init_from": {},
                         "focal_alpha": FOCAL_ALPHA, "focal_gamma": FOCAL_GAMMA})
    rng = np.random.default_rng(seed)
    order = sorted(QPS, key=lambda q: lambdas[q])
    prev = None
    for qp in order:
        if mode == "sequential" and prev is not None:
            models.params.copy_prefix(f"qp{prev}/", f"qp{qp}/")
            models.meta["init_from"][str(qp)] = f"qp{prev}"
            epochs = epochs_next
        else:
            fresh = ParamStore(seed + 1000 * qp if mode == "independent" else seed)
            tmp = BaseModels(fresh)
            _build(tmp.scope(qp), core.as_coords([[0, 0, 0]]))
            models.params.load_state(fresh.state())
            models.meta["init_from"][str(qp)] = "scratch"
            epochs = epochs_first
        _train_one(models, qp, blocks, epochs, lr, batch, rng, history, mode)
        prev = qp
    return models
