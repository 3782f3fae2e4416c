"""Scalable enhancement layers.

An enhancement layer re-codes a block at a new operating point (qp_t, sf_t)
using the previously decoded latents ``ŷ_s`` as side information instead of
a hyperprior:

* RQuLPE-C predicts, for each of the 8 children of every source latent,
  the probability that it is an occupied target latent; the occupancy bits
  are rANS coded under those probabilities (only when the resolution
  doubles, ``up``).
* RQuLPE-F predicts a Gaussian ``(mu, sigma)`` per target latent element
  from a kNN-averaged coarse estimate refined by cross-attention to the
  source and two self-attention layers; the residuals are coded exactly as
  in the base layer.

Consecutive operating points must satisfy: sf ratio 1 or 2, and
``qp_s <= qp_t + 1``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import basecodec as bc
from . import core, entropy, octree
from .core import CodingConfig, InvalidInput, InvalidParameter, PointCloud, SparseTensor
from .entropy import GaussianParams, RansStream
from .nn import autograd as ag
from .nn import layers as L
from .nn.autograd import Tensor, no_grad
from .nn.layers import STensor
from .nn.params import Adam, ParamStore, PlateauSchedule, pack_with_meta, unpack_with_meta

log = logging.getLogger(__name__)

KNN_K = 5
EMBED = 16
ATTN_WIDTH = 32
QP_EMBED = 8
N_SELF_ATTENTION = 2
PROB_EPS = 1e-6
MODE_PREDICTED, MODE_INTRA = 0, 1


class InvalidLayerChain(InvalidParameter):
    """Raised with every violated rule; ``violations`` lists (position, source, target, rule, text)."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(v[4] for v in self.violations))


@dataclass(frozen=True)
class LayerConfig:
    source: CodingConfig
    target: CodingConfig
    up: bool = None

    def __post_init__(self):
        up = self.source.sf == 2 * self.target.sf
        if self.up is None:
            object.__setattr__(self, "up", up)
        elif self.up != up:
            raise InvalidParameter("up must equal (source.sf == 2 * target.sf)")
        ratio = self.source.sf / self.target.sf
        if ratio not in (1, 2):
            raise InvalidParameter(f"sf ratio {ratio:g} between {self.source} and {self.target} not in {{1, 2}}")
        if self.source.qp > self.target.qp + 1:
            raise InvalidParameter(f"qp_s={self.source.qp} exceeds qp_t+1={self.target.qp + 1}")


def _as_config(item) -> CodingConfig:
    if isinstance(item, CodingConfig):
        return item
    if isinstance(item, str):
        return CodingConfig.parse(item)
    return CodingConfig(*item)


def validate_layer_chain(chain) -> list[LayerConfig]:
    """Check consecutive operating points; report every violation with its rule."""
    chain = list(chain)
    if not chain:
        raise InvalidParameter("layer chain must hold at least one configuration")
    violations, configs = [], []
    for i, item in enumerate(chain):
        try:
            configs.append(_as_config(item))
        except InvalidParameter as exc:
            rule = "sf-power-of-two" if "sf" in str(exc) else "qp-range"
            violations.append((i, item, None, rule, f"entry {i} ({item!r}): {exc} [rule {rule}]"))
            configs.append(None)
    layers = []
    for i in range(1, len(configs)):
        s, t = configs[i - 1], configs[i]
        if s is None or t is None:
            continue
        pair = f"layer {i} ({s} -> {t})"
        ok = True
        if s.sf not in (t.sf, 2 * t.sf):
            violations.append((i, s, t, "sf-ratio", f"{pair}: sf_s/sf_t = {s.sf / t.sf:g}, must be 1 or 2 [rule sf-ratio]"))
            ok = False
        if s.qp > t.qp + 1:
            violations.append((i, s, t, "qp-step", f"{pair}: qp_s = {s.qp} > qp_t + 1 = {t.qp + 1} [rule qp-step]"))
            ok = False
        if ok:
            layers.append(LayerConfig(s, t))
    if violations:
        raise InvalidLayerChain(violations)
    return layers


# ----------------------------------------------------------------- models
@dataclass
class RQuLPEModels:
    params: ParamStore
    meta: dict = field(default_factory=dict)

    @property
    def c(self):
        return self.params.scope("c/")

    @property
    def f(self):
        return self.params.scope("f/")

    def to_bytes(self) -> bytes:
        return pack_with_meta(self.params, self.meta)

    @classmethod
    def from_bytes(cls, data: bytes) -> "RQuLPEModels":
        return cls(*unpack_with_meta(data))

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "RQuLPEModels":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def init_rqulpe(seed: int = 0) -> RQuLPEModels:
    rq = RQuLPEModels(ParamStore(seed), {"seed": seed, "embed": EMBED, "attn_width": ATTN_WIDTH,
                                         "knn": KNN_K, "self_attention_layers": N_SELF_ATTENTION})
    probe = SparseTensor(np.zeros((1, 3), dtype=np.int64), np.zeros((1, bc.C_Y)))
    with no_grad():
        _c_graph(rq.c, STensor.from_sparse(probe), 1)
        _f_graph(rq.f, STensor.from_sparse(probe), probe.coords, 1, 1, False)
    return rq


def one_hot_qp(qp: int) -> np.ndarray:
    v = np.zeros(5)
    v[core.check_qp(qp) - 1] = 1.0
    return v


# ----------------------------------------------------------------- RQuLPE-C
def _c_graph(s, ys: STensor, qp_s: int) -> tuple[np.ndarray, Tensor]:
    e = L.mlp_forward(s, "qp", Tensor(one_hot_qp(qp_s)[None]), [5, QP_EMBED, QP_EMBED])
    h = ys.with_feats(ag.concat([ys.feats, ag.broadcast_rows(e, len(ys))], axis=1))
    cin = bc.C_Y + QP_EMBED
    h = L.relu(L.conv(s, "c0", h, cin, 32))
    h = L.relu(L.conv(s, "c1", h, 32, 32))
    h = L.relu(L.deconv(s, "up", h, 32, 16))
    h = L.inception_resnet(s, "r0", h, 16)
    p = ag.sigmoid(L.conv(s, "head", h, 16, 1, ksize=1).feats)
    return h.coords, ag.reshape(p, (-1,))


def rqulpe_c_forward(rq: RQuLPEModels, y_s_hat: SparseTensor, qp_s: int) -> SparseTensor:
    """Occupancy probability for each of the 8 children of every source latent."""
    if len(y_s_hat) == 0:
        raise InvalidInput("RQuLPE-C needs non-empty source latents")
    with no_grad():
        coords, p = _c_graph(rq.c, STensor.from_sparse(y_s_hat), qp_s)
    return SparseTensor(coords, np.clip(p.data, PROB_EPS, 1 - PROB_EPS)[:, None])


@dataclass
class CoordStreams:
    occupancy: RansStream
    escape: octree.OctreeStream | None = None

    @property
    def nbytes(self) -> int:
        return len(self.occupancy) + (0 if self.escape is None else 1 + len(self.escape))


def code_coord_enhancement(rq: RQuLPEModels, y_s_hat: SparseTensor, qp_s: int, y_t_coords) -> CoordStreams:
    """rANS code which children of the source latents are target latents.

    Target latents whose parent is not a source latent (possible where
    rounding moves a point across a latent or block boundary) are sent in
    a small octree escape stream.
    """
    probs = rqulpe_c_forward(rq, y_s_hat, qp_s)
    y_t = core.as_coords(y_t_coords)
    cand_keys = core.pack(probs.coords)
    hit = core.lookup(cand_keys, core.pack(y_t)) if len(y_t) else np.zeros(0, dtype=np.int64)
    labels = np.zeros(len(cand_keys), dtype=np.int64)
    labels[hit[hit >= 0]] = 1
    occ = entropy.rans_encode(labels, entropy.BernoulliModel(probs.features[:, 0]))
    orphans = y_t[hit < 0]
    esc = None
    if len(orphans):
        log.debug("%d target latents without a source parent sent as escapes", len(orphans))
        esc = octree.octree_encode(orphans, octree.depth_for(int(orphans.max()) + 1))
    return CoordStreams(occ, esc)


def decode_coord_enhancement(rq: RQuLPEModels, y_s_hat: SparseTensor, qp_s: int, streams: CoordStreams) -> np.ndarray:
    probs = rqulpe_c_forward(rq, y_s_hat, qp_s)
    labels = entropy.rans_decode(streams.occupancy, entropy.BernoulliModel(probs.features[:, 0]), len(probs))
    keys = core.pack(probs.coords)[labels == 1]
    if streams.escape is not None:
        keys = np.union1d(keys, core.pack(octree.octree_decode(streams.escape)))
    return core.unpack(np.sort(keys))


# ----------------------------------------------------------------- RQuLPE-F
def _neighbors(y_s_coords, y_t_coords, up: bool):
    ref = core.as_coords(y_s_coords) * (2 if up else 1)
    kk = min(KNN_K, len(ref))
    return ref, core.knn(y_t_coords, ref, kk)


def coarse_estimate(y_s_hat: SparseTensor, y_t_coords, up: bool = False) -> SparseTensor:
    """Average of the (up to) 5 nearest source latents for every target coordinate."""
    if len(y_s_hat) == 0:
        raise InvalidInput("coarse estimate needs non-empty source latents")
    y_t = core.as_coords(y_t_coords)
    _, nbr = _neighbors(y_s_hat.coords, y_t, up)
    return SparseTensor(y_t, y_s_hat.features[nbr].mean(axis=1))


def _coarse_graph(feats: Tensor, nbr) -> Tensor:
    return ag.mul(ag.tsum(ag.take_rows(feats, nbr), axis=1), 1.0 / nbr.shape[1])


def param_one_hot(qp_s: int, qp_t: int, up: bool) -> np.ndarray:
    return np.concatenate([one_hot_qp(qp_s), one_hot_qp(qp_t), [1.0 if up else 0.0]])


def _embed(s, qp_s, qp_t, up) -> Tensor:
    return L.mlp_forward(s, "embed", Tensor(param_one_hot(qp_s, qp_t, up)[None]), [11, EMBED, EMBED])


def embed_params(rq: RQuLPEModels, qp_s: int, qp_t: int, up: bool) -> np.ndarray:
    """Shared embedding of the coding parameters (width 16)."""
    with no_grad():
        return _embed(rq.f, qp_s, qp_t, up).data[0].copy()


def _sigma_bias(shape):
    # softplus(b) + SIGMA_MIN = 1
    return np.full(shape, np.log(np.expm1(1.0 - entropy.SIGMA_MIN)))


def _f_graph(s, ys: STensor, y_t_coords, qp_s, qp_t, up) -> tuple[Tensor, Tensor]:
    y_t = core.as_coords(y_t_coords)
    ref, nbr = _neighbors(ys.coords, y_t, up)
    coarse = _coarse_graph(ys.feats, nbr)
    e = _embed(s, qp_s, qp_t, up)
    width = bc.C_Y + EMBED
    src = STensor(ys.coords, ag.concat([ys.feats, ag.broadcast_rows(e, len(ys))], axis=1))
    tgt = STensor(y_t, ag.concat([coarse, ag.broadcast_rows(e, len(y_t))], axis=1))
    h = L.vector_attention(s, "xa", src, tgt, ATTN_WIDTH, KNN_K, ref_coords=ref, query_coords=y_t)
    for i in range(N_SELF_ATTENTION):
        h = L.vector_attention(s, f"sa{i}", h, h, ATTN_WIDTH, KNN_K)
    # zero-initialized heads: an untrained predictor is the coarse estimate with sigma = 1
    mu = ag.add(coarse, L.dense(s, "mu", h.feats, width, bc.C_Y, w_init="zeros"))
    sigma = ag.add(ag.softplus(L.dense(s, "sigma", h.feats, width, bc.C_Y, w_init="zeros", b_init=_sigma_bias)),
                   entropy.SIGMA_MIN)
    return mu, sigma


def rqulpe_f_forward(rq: RQuLPEModels, y_s_hat: SparseTensor, y_t_coords, qp_s: int, qp_t: int,
                     up: bool) -> GaussianParams:
    """Gaussian parameters for every target latent element."""
    if len(y_s_hat) == 0:
        raise InvalidInput("RQuLPE-F needs non-empty source latents")
    if len(y_t_coords) == 0:
        raise InvalidInput("RQuLPE-F needs non-empty target coordinates")
    with no_grad():
        mu, sigma = _f_graph(rq.f, STensor.from_sparse(y_s_hat), y_t_coords, qp_s, qp_t, up)
    return GaussianParams(mu.data, sigma.data)


# ----------------------------------------------------------------- records
@dataclass
class EnhancementRecord:
    """One block of an enhancement layer.

    ``mode`` is predicted (source latents available) or intra (no source
    block: the block is coded by the base codec at the target qp).
    """

    index: int
    k: int
    latent_stream: RansStream | None = None
    coords: CoordStreams | None = None
    mode: int = MODE_PREDICTED
    intra: bc.BlockRecord | None = None

    @property
    def coords_stream(self):
        return None if self.coords is None else self.coords.occupancy

    @property
    def nbytes(self) -> int:
        if self.mode == MODE_INTRA:
            return self.intra.nbytes
        return len(self.latent_stream) + (0 if self.coords is None else self.coords.nbytes)


@dataclass
class LayerResult:
    """Coded or decoded layer state: per-block latents and the reconstructed cloud."""

    records: list
    latents: dict
    points: PointCloud
    block_points: dict = field(default_factory=dict)


def block_size(region: int, sf: int) -> int:
    bs = region // sf
    if bs < bc.STRIDE or region % sf:
        raise InvalidParameter(f"region {region} too small for sf={sf} (block side {bs} < {bc.STRIDE})")
    return bs


def layer_blocks(pc: PointCloud, sf: int, region: int) -> dict:
    """Blocks of ``pc`` downscaled by ``sf``; side ``region/sf`` keeps block ids aligned across layers."""
    bs = block_size(region, sf)
    return {b.index: b for b in core.split_blocks(core.downscale_coords(pc, sf), bs)}


def block_origin(index: int, bs: int) -> np.ndarray:
    return core.morton_decode(np.array([index], dtype=np.uint64))[0].astype(np.int64) * bs


def _gather(block_pts: dict, region: int, sf: int) -> PointCloud:
    bs = block_size(region, sf)
    parts = [pts + block_origin(i, bs) for i, pts in block_points_sorted(block_pts)]
    if not parts:
        return PointCloud(np.zeros((0, 3), dtype=np.int64))
    return PointCloud.from_points(np.concatenate(parts))


def block_points_sorted(block_pts: dict):
    return sorted(block_pts.items())


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, items))


def encode_enhancement_block(models: bc.BaseModels, rq: RQuLPEModels, x_coords, y_s_hat: SparseTensor | None,
                             cfg: LayerConfig, index: int = 0, k: int | None = None, mode_decision: bool = True):
    """Code one block at the target config; returns (record, ŷ_t, reconstruction).

    Without source latents the block is coded intra.  With ``mode_decision``
    the encoder also tries intra coding and keeps whichever mode spends
    fewer bytes.
    """
    qp_t = cfg.target.qp
    xc = core.as_coords(x_coords)
    if y_s_hat is None or len(y_s_hat) == 0:
        return _intra(models, bc.code_block_latents(models, xc, qp_t), xc, cfg, index, k)
    y_t = bc.analysis(models, xc, qp_t)
    coords = None
    if cfg.up:
        coords = code_coord_enhancement(rq, y_s_hat, cfg.source.qp, y_t.coords)
    elif not np.array_equal(y_t.coords, y_s_hat.coords):
        raise core.StructuralMismatch("same-resolution layer changed the latent coordinates")
    g = rqulpe_f_forward(rq, y_s_hat, y_t.coords, cfg.source.qp, qp_t, cfg.up)
    yhat_f, stream = bc.code_latents(y_t.features, g.mu, g.sigma)
    rec = EnhancementRecord(index, 0, stream, coords)
    if mode_decision:
        lc = bc.code_block_latents(models, xc, qp_t)
        if lc.nbytes < rec.nbytes:
            return _intra(models, lc, xc, cfg, index, k)
    yhat = SparseTensor(y_t.coords, yhat_f)
    syn = bc.synthesize(models, yhat, qp_t)
    rec.k = int(bc.optimize_k(syn.coords, syn.probs, xc) if k is None else k)
    return rec, yhat, bc.select_top_k(syn, rec.k)


def _intra(models, lc, xc, cfg, index, k):
    enc = bc.finish_block(models, lc, xc, cfg.target.qp, index, k)
    return EnhancementRecord(index, enc.record.k, mode=MODE_INTRA, intra=enc.record), enc.yhat, enc.recon


def decode_enhancement_latents(models, rq, rec: EnhancementRecord, y_s_hat, cfg: LayerConfig) -> SparseTensor:
    if rec.mode == MODE_INTRA:
        return bc.decode_latents_base(models, rec.intra, cfg.target.qp)
    if y_s_hat is None or len(y_s_hat) == 0:
        raise core.CorruptStream(f"block {rec.index}: predicted record without source latents")
    if cfg.up:
        if rec.coords is None:
            raise core.CorruptStream(f"block {rec.index}: up layer record lacks a coordinate stream")
        y_t_coords = decode_coord_enhancement(rq, y_s_hat, cfg.source.qp, rec.coords)
    else:
        y_t_coords = y_s_hat.coords
    g = rqulpe_f_forward(rq, y_s_hat, y_t_coords, cfg.source.qp, cfg.target.qp, cfg.up)
    return SparseTensor(y_t_coords, bc.decode_latents(rec.latent_stream, g.mu, g.sigma))


def decode_enhancement_block(models, rq, rec: EnhancementRecord, y_s_hat, cfg: LayerConfig):
    yhat = decode_enhancement_latents(models, rq, rec, y_s_hat, cfg)
    syn = bc.synthesize(models, yhat, cfg.target.qp)
    return yhat, bc.select_top_k(syn, rec.k)


def encode_base_layer(pc: PointCloud, config: CodingConfig, models: bc.BaseModels, region: int,
                      threads: int = 1) -> LayerResult:
    blocks = layer_blocks(pc, config.sf, region)

    def one(item):
        i, b = item
        return bc.encode_block_base(models, b.tensor.coords, config.qp, index=i)

    encs = _map(one, sorted(blocks.items()), threads)
    lat = {e.record.index: e.yhat for e in encs}
    pts = {e.record.index: e.recon for e in encs}
    return LayerResult([e.record for e in encs], lat, _gather(pts, region, config.sf), pts)


def decode_base_layer(records, config: CodingConfig, models: bc.BaseModels, region: int,
                      threads: int = 1, synthesize: bool = True) -> LayerResult:
    """Rebuild ŷ for every block; with ``synthesize`` also the top-k reconstruction."""

    def one(rec):
        yhat = bc.decode_latents_base(models, rec, config.qp)
        pts = None
        if synthesize:
            pts = bc.select_top_k(bc.synthesize(models, yhat, config.qp), rec.k)
        return rec.index, yhat, pts

    return _collect(list(records), _map(one, list(records), threads), region, config.sf, synthesize)


def _collect(records, out, region, sf, synthesize) -> LayerResult:
    lat = {i: y for i, y, _ in out}
    if not synthesize:
        return LayerResult(records, lat, PointCloud(np.zeros((0, 3), dtype=np.int64)))
    pts = {i: p for i, _, p in out}
    return LayerResult(records, lat, _gather(pts, region, sf), pts)


def encode_enhancement_layer(pc: PointCloud, source_latents: dict, cfg: LayerConfig, models: bc.BaseModels,
                             rq: RQuLPEModels, region: int, threads: int = 1,
                             mode_decision: bool = True) -> LayerResult:
    """Code every target block of ``pc`` against the decoded source latents."""
    blocks = layer_blocks(pc, cfg.target.sf, region)

    def one(item):
        i, b = item
        return encode_enhancement_block(models, rq, b.tensor.coords, source_latents.get(i), cfg, index=i,
                                        mode_decision=mode_decision)

    out = _map(one, sorted(blocks.items()), threads)
    pts = {r.index: p for r, _, p in out}
    return LayerResult([r for r, _, _ in out], {r.index: y for r, y, _ in out},
                       _gather(pts, region, cfg.target.sf), pts)


def decode_enhancement_layer(records, source_latents: dict, cfg: LayerConfig, models: bc.BaseModels,
                             rq: RQuLPEModels, region: int, threads: int = 1,
                             synthesize: bool = True) -> LayerResult:
    def one(rec):
        yhat = decode_enhancement_latents(models, rq, rec, source_latents.get(rec.index), cfg)
        pts = None
        if synthesize:
            pts = bc.select_top_k(bc.synthesize(models, yhat, cfg.target.qp), rec.k)
        return rec.index, yhat, pts

    return _collect(list(records), _map(one, list(records), threads), region, cfg.target.sf, synthesize)


# ----------------------------------------------------------------- training
SF_LEVELS = (1, 2, 4)


def valid_f_tuples():
    """All (qp_s, qp_t, sf_s, sf_t) allowed for a feature-prediction layer."""
    out = []
    for qs in bc.QPS:
        for qt in bc.QPS:
            if qs > qt + 1:
                continue
            for st in SF_LEVELS:
                for ss in (st, 2 * st):
                    if ss in SF_LEVELS:
                        out.append((qs, qt, ss, st))
    return out


def valid_c_tuples():
    """All (qp_s, sf_s, sf_t) with a coordinate enhancement (sf_s = 2 sf_t)."""
    return [(qs, 2 * st, st) for qs in bc.QPS for st in SF_LEVELS if 2 * st in SF_LEVELS]


def sample_f_tuple(rng):
    """Uniform draw over valid tuples by rejection."""
    while True:
        qs, qt = (int(v) for v in rng.integers(1, 6, 2))
        st = int(rng.choice(SF_LEVELS))
        ss = st * int(rng.integers(1, 3))
        if qs <= qt + 1 and ss in SF_LEVELS:
            return qs, qt, ss, st


def sample_c_tuple(rng):
    while True:
        qs = int(rng.integers(1, 6))
        st = int(rng.choice(SF_LEVELS))
        if 2 * st in SF_LEVELS:
            return qs, 2 * st, st


@dataclass
class LatentBank:
    """Precomputed continuous and base-quantized latents per (cloud, qp, sf, block)."""

    y: dict
    yhat: dict
    keys: list

    def has(self, key):
        return key in self.yhat


def quantized_latents(models: bc.BaseModels, coords, qp: int):
    """Continuous y and the base codec's ŷ = mu + round(y - mu) (no entropy coding)."""
    y = bc.analysis(models, coords, qp)
    z = bc.hyper_analysis(models, y, qp)
    zq = entropy.clamp_residuals(core.round_half_away(z.features).astype(np.int64))
    g = bc.hyper_synthesis(models, SparseTensor(z.coords, zq.astype(np.float64)), y.coords, qp)
    r = entropy.clamp_residuals(entropy.quantize_residuals(y.features, g.mu))
    return y, SparseTensor(y.coords, entropy.dequantize(g.mu, r))


def build_latent_bank(models: bc.BaseModels, clouds, region: int, qps=bc.QPS, sfs=SF_LEVELS) -> LatentBank:
    """Latents for every cloud, qp, sf and block; ``keys`` lists the (cloud, block) regions."""
    y, yhat, keys = {}, {}, set()
    for ci, pc in enumerate(clouds):
        for sf in sfs:
            for idx, b in layer_blocks(pc, sf, region).items():
                keys.add((ci, idx))
                for qp in qps:
                    yy, yh = quantized_latents(models, b.tensor.coords, qp)
                    y[ci, qp, sf, idx] = yy
                    yhat[ci, qp, sf, idx] = yh
    return LatentBank(y, yhat, sorted(keys))


def f_loss(s, bank: LatentBank, ci, idx, tup) -> Tensor | None:
    qs, qt, ss, st = tup
    src, tgt = bank.yhat.get((ci, qs, ss, idx)), bank.y.get((ci, qt, st, idx))
    if src is None or tgt is None:
        return None
    mu, sigma = _f_graph(s, STensor.from_sparse(src), tgt.coords, qs, qt, ss == 2 * st)
    return ag.mean(ag.gaussian_bits_op(Tensor(tgt.features), mu, sigma))


def c_loss(s, bank: LatentBank, ci, idx, tup) -> Tensor | None:
    qs, ss, st = tup
    src, tgt = bank.yhat.get((ci, qs, ss, idx)), bank.y.get((ci, qs, st, idx))
    if src is None or tgt is None:
        return None
    coords, p = _c_graph(s, STensor.from_sparse(src), qs)
    labels = core.lookup(core.pack(tgt.coords), core.pack(coords)) >= 0
    return ag.mul(ag.bce_bits_op(p, labels), 1.0 / len(coords))


def validation_loss(rq: RQuLPEModels, bank: LatentBank, keys) -> dict:
    """Exhaustive sweep over every valid parameter tuple on the validation blocks."""
    fs, cs = [], []
    with no_grad():
        for ci, idx in keys:
            for tup in valid_f_tuples():
                if (v := f_loss(rq.f, bank, ci, idx, tup)) is not None:
                    fs.append(v.item())
            for tup in valid_c_tuples():
                if (v := c_loss(rq.c, bank, ci, idx, tup)) is not None:
                    cs.append(v.item())
    f = float(np.mean(fs)) if fs else 0.0
    c = float(np.mean(cs)) if cs else 0.0
    return {"f": f, "c": c, "total": f + c}


def train_rqulpe(bank: LatentBank, train_keys, val_keys, seed: int = 0, max_epochs: int = 30, lr: float = 1e-3,
                 batch: int = 4, history: list | None = None, rq: RQuLPEModels | None = None) -> RQuLPEModels:
    """Train both predictors on uniformly sampled valid parameter tuples.

    Each training region (cloud, block index) is paired with a random valid
    tuple per epoch.  RQuLPE-C and RQuLPE-F have independent Adam states and
    plateau schedules (x0.1 after 7 stagnant validation epochs, stop after
    10); each keeps its own best validation checkpoint.
    """
    rq = init_rqulpe(seed) if rq is None else rq
    history = [] if history is None else history
    rng = np.random.default_rng(seed)
    parts = {"f": (f_loss, sample_f_tuple, lambda: rq.f), "c": (c_loss, sample_c_tuple, lambda: rq.c)}
    opts = {k: Adam(rq.params, lr=lr, prefix=f"{k}/") for k in parts}
    scheds = {k: PlateauSchedule(lr) for k in parts}
    best = {k: rq.params.state(f"{k}/") for k in parts}
    for epoch in range(max_epochs):
        active = [k for k in parts if not scheds[k].stop]
        if not active:
            break
        order = rng.permutation(len(train_keys))
        tot = {k: [0.0, 0] for k in parts}
        for start in range(0, len(order), batch):
            rq.params.zero_grad()
            terms = {k: [] for k in parts}
            for j in order[start:start + batch]:
                ci, idx = train_keys[j]
                for k, (fn, sample, scope) in parts.items():
                    tup = sample(rng)  # drawn for stopped parts too, so the tuple stream stays fixed
                    if k in active and (loss := fn(scope(), bank, ci, idx, tup)) is not None:
                        terms[k].append(loss)
            for k in active:
                if not terms[k]:
                    continue
                total = terms[k][0]
                for t in terms[k][1:]:
                    total = ag.add(total, t)
                total = ag.mul(total, 1.0 / len(terms[k]))
                if not np.isfinite(total.item()):
                    raise bc.TrainingDiverged(f"non-finite RQuLPE-{k.upper()} loss at epoch {epoch}")
                total.backward()
                opts[k].step()
                tot[k][0] += total.item()
                tot[k][1] += 1
        val = validation_loss(rq, bank, val_keys)
        row = {"epoch": epoch, "loss_f": tot["f"][0] / max(tot["f"][1], 1),
               "loss_c": tot["c"][0] / max(tot["c"][1], 1), "val_f": val["f"], "val_c": val["c"],
               "lr_f": opts["f"].lr, "lr_c": opts["c"].lr}
        history.append(row)
        log.info("rqulpe epoch=%d val_f=%.4f val_c=%.4f", epoch, val["f"], val["c"])
        for k in active:
            if val[k] < scheds[k].best:
                best[k] = rq.params.state(f"{k}/")
            opts[k].lr = scheds[k].update(val[k])
    for k in parts:
        rq.params.load_state(best[k])
        rq.meta[f"best_val_{k}"] = float(scheds[k].best)
    rq.meta["epochs"] = len(history)
    return rq
