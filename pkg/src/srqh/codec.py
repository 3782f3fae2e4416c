"""Whole-cloud scalable encode/decode on top of the base and enhancement layers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import container, core, enhancement
from .basecodec import BaseModels
from .core import CodingConfig, InvalidParameter, PointCloud
from .enhancement import RQuLPEModels


def grid_depth(pc: PointCloud) -> int:
    top = int(np.max(pc.points)) + 1 if len(pc.points) else 1
    return max(1, math.ceil(math.log2(max(top, 2))))


@dataclass
class EncodeResult:
    container: container.Container
    data: bytes
    layers: list  # LayerResult per layer (encoder-side latents and reconstructions)

    def layer_sizes(self):
        return self.container.layer_sizes()


def encode_scalable(pc: PointCloud, chain, models: BaseModels, rq: RQuLPEModels | None, region: int,
                    threads: int = 1, mode_decision: bool = True) -> EncodeResult:
    """Base layer at ``chain[0]`` then one enhancement layer per further entry.

    ``mode_decision`` lets the encoder code a block intra when that is
    cheaper than predicting it from the previous layer.
    """
    chain = [enhancement._as_config(c) for c in chain]
    layer_cfgs = enhancement.validate_layer_chain(chain)
    if len(chain) > 1 and rq is None:
        raise InvalidParameter("enhancement layers need RQuLPE models")
    for c in chain:
        enhancement.block_size(region, c.sf)
    results = [enhancement.encode_base_layer(pc, chain[0], models, region, threads)]
    for cfg in layer_cfgs:
        results.append(enhancement.encode_enhancement_layer(pc, results[-1].latents, cfg, models, rq, region,
                                                           threads, mode_decision))
    c = container.Container(grid_depth(pc), region, len(pc.points), chain, [r.records for r in results])
    return EncodeResult(c, c.serialize(), results)


@dataclass
class DecodeResult:
    points: PointCloud  # at the decoded layer's (downscaled) grid
    config: CodingConfig
    layer: int
    bytes_read: int
    latents: dict

    def upscaled(self) -> PointCloud:
        return PointCloud(core.upscale_coords(self.points.points, self.config.sf))


def decode_scalable(data: bytes, layer: int | None, models: BaseModels, rq: RQuLPEModels | None,
                    threads: int = 1, reader: container.ByteReader | None = None) -> DecodeResult:
    """Decode the base plus enhancement layers ``1..layer`` only; later layers are skipped unread."""
    r = container.ByteReader(data) if reader is None else reader
    head = container.parse_header(container.ByteReader(data))
    t = len(head.chain) - 1 if layer is None else layer
    if not (0 <= t < len(head.chain)):
        raise InvalidParameter(f"layer {layer} out of range for a {len(head.chain)}-layer stream")
    c = container.parse(data, upto=t, reader=r)
    # only the requested layer runs the synthesis transform; earlier layers just supply latents
    res = enhancement.decode_base_layer(c.layers[0], c.chain[0], models, c.region, threads, synthesize=t == 0)
    for i in range(1, t + 1):
        cfg = enhancement.LayerConfig(c.chain[i - 1], c.chain[i])
        res = enhancement.decode_enhancement_layer(c.layers[i], res.latents, cfg, models, rq, c.region, threads,
                                                   synthesize=i == t)
    return DecodeResult(res.points, c.chain[t], t, r.bytes_read(), res.latents)
