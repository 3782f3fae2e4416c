"""Geometry quality, rate, Bjontegaard deltas and latent-alignment analysis."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.spatial import cKDTree

from . import core
from .core import InvalidInput, PointCloud

log = logging.getLogger(__name__)

NORMAL_NEIGHBORS = 9


class UndefinedOverlap(ValueError):
    pass


def _points(pc) -> np.ndarray:
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidInput("metric needs non-empty point clouds")
    return pts


def default_peak(pc) -> float:
    """Voxel-grid span ``2**depth - 1`` of the cloud's bounding grid."""
    top = int(np.max(_points(pc))) + 1
    depth = max(1, math.ceil(math.log2(max(top, 2))))
    return float(2 ** depth - 1)


def _psnr(mse: float, peak: float) -> float:
    if mse <= 0:
        return math.inf
    return 10.0 * math.log10(3.0 * peak * peak / mse)


def d1_mse(ref, rec) -> float:
    a, b = _points(ref), _points(rec)
    d_ab, _ = cKDTree(a).query(b)
    d_ba, _ = cKDTree(b).query(a)
    return max(float(np.mean(d_ab ** 2)), float(np.mean(d_ba ** 2)))


def psnr_d1(ref, rec, peak: float | None = None) -> float:
    """Symmetric point-to-point PSNR; ``inf`` when the clouds coincide."""
    peak = default_peak(ref) if peak is None else float(peak)
    return _psnr(d1_mse(ref, rec), peak)


def estimate_normals(pts, k: int = NORMAL_NEIGHBORS) -> tuple[np.ndarray, np.ndarray]:
    """Plane-fit normals from the ``k`` nearest neighbours.

    Returns unit normals and a boolean mask of degenerate neighbourhoods
    (fewer than 3 points or collinear), whose normals are zero.
    """
    pts = np.asarray(pts, dtype=np.float64)
    n = len(pts)
    normals = np.zeros((n, 3))
    bad = np.ones(n, dtype=bool)
    if n < 3:
        return normals, bad
    kk = min(k, n)
    _, nbr = cKDTree(pts).query(pts, kk)
    nb = pts[nbr]
    cen = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", cen, cen) / kk
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    scale = np.maximum(w[:, 2], 1e-12)
    bad = w[:, 1] / scale < 1e-9
    normals[bad] = 0.0
    return normals, bad


def _reference_normals(ref):
    if isinstance(ref, PointCloud) and ref.normals is not None:
        nrm = np.asarray(ref.normals, dtype=np.float64)
        return nrm, np.linalg.norm(nrm, axis=1) == 0
    return estimate_normals(_points(ref))


def d2_mse(ref, rec, normals=None) -> float:
    a, b = _points(ref), _points(rec)
    nrm, bad = _reference_normals(ref) if normals is None else (np.asarray(normals, float), None)
    if bad is None:
        bad = np.linalg.norm(nrm, axis=1) == 0
    if np.any(bad):
        log.warning("%d reference points without a usable normal; using point-to-point error there", int(bad.sum()))
    # rec -> ref: error from the nearest reference point, projected on its normal
    d, i = cKDTree(a).query(b)
    err = b - a[i]
    proj = np.einsum("ij,ij->i", err, nrm[i]) ** 2
    e_ba = np.where(bad[i], d ** 2, proj)
    # ref -> rec: error to the nearest reconstructed point, projected on the reference normal
    d, j = cKDTree(b).query(a)
    err = b[j] - a
    proj = np.einsum("ij,ij->i", err, nrm) ** 2
    e_ab = np.where(bad, d ** 2, proj)
    return max(float(np.mean(e_ba)), float(np.mean(e_ab)))


def psnr_d2(ref, rec, peak: float | None = None, normals=None) -> float:
    """Symmetric point-to-plane PSNR using (given or estimated) reference normals."""
    peak = default_peak(ref) if peak is None else float(peak)
    return _psnr(d2_mse(ref, rec, normals), peak)


def bpp(stream_bytes: int, original_points: int) -> float:
    if original_points <= 0:
        raise InvalidInput("bpp needs a positive point count")
    return 8.0 * stream_bytes / original_points


@dataclass
class RdPoint:
    bpp: float
    psnr_d1: float
    psnr_d2: float = math.nan
    config: str = ""


@dataclass
class BDResult:
    bd_rate: float
    bd_psnr: float
    bd_rate_cubic: float
    bd_psnr_cubic: float


def _curve(points):
    pts = sorted(points, key=lambda p: p.bpp)
    if len(pts) < 4:
        raise InvalidInput("Bjontegaard metrics need at least 4 points per curve")
    r = np.log10([p.bpp for p in pts])
    q = np.array([p.psnr_d1 for p in pts], dtype=np.float64)
    if np.any(np.diff(r) <= 0) or np.any(np.diff(q) <= 0):
        raise InvalidInput("RD curves must be strictly monotone")
    return r, q


def _avg_pchip(x, y, lo, hi):
    f = PchipInterpolator(x, y)
    return float(f.integrate(lo, hi) / (hi - lo))


def _avg_poly(x, y, lo, hi):
    c = np.polyint(np.polyfit(x, y, 3))
    return float((np.polyval(c, hi) - np.polyval(c, lo)) / (hi - lo))


def bd_metrics(curve_a, curve_b) -> BDResult:
    """BD-rate (%) and BD-PSNR (dB) of curve B relative to curve A.

    PCHIP interpolation in log-rate is authoritative; the classic cubic
    polynomial fit is reported alongside.
    """
    ra, qa = _curve(curve_a)
    rb, qb = _curve(curve_b)
    lo_q, hi_q = max(qa.min(), qb.min()), min(qa.max(), qb.max())
    lo_r, hi_r = max(ra.min(), rb.min()), min(ra.max(), rb.max())
    if lo_q >= hi_q or lo_r >= hi_r:
        raise UndefinedOverlap("RD curves do not overlap")
    out = []
    for avg in (_avg_pchip, _avg_poly):
        d_rate = avg(qb, rb, lo_q, hi_q) - avg(qa, ra, lo_q, hi_q)
        d_psnr = avg(rb, qb, lo_r, hi_r) - avg(ra, qa, lo_r, hi_r)
        out.append(((10 ** d_rate - 1) * 100.0, d_psnr))
    return BDResult(out[0][0], out[0][1], out[1][0], out[1][1])


def write_rd_csv(path, points):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "bpp", "psnr_d1", "psnr_d2"])
        for p in points:
            w.writerow([p.config, repr(p.bpp), repr(p.psnr_d1), repr(p.psnr_d2)])


# ----------------------------------------------------------------- latent similarity
@dataclass
class SimilarityMatrix:
    """Mean cosine similarity of latents, rows qp_s / columns qp_t (NaN = no matches)."""

    matrix: np.ndarray
    sf: tuple
    mode: str

    def off_diagonal(self) -> np.ndarray:
        return self.matrix[~np.eye(5, dtype=bool)]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"qp_s\\qp_t (sf {self.sf[0]},{self.sf[1]}; {self.mode})"] + [str(q) for q in range(1, 6)])
            for i in range(5):
                w.writerow([str(i + 1)] + [repr(float(v)) for v in self.matrix[i]])


def _unit(f):
    n = np.linalg.norm(f, axis=1, keepdims=True)
    return np.divide(f, n, out=np.zeros_like(f), where=n > 0)


def block_cosines(ya: core.SparseTensor, yb: core.SparseTensor, lift: int = 1, radius: float = 2.0) -> np.ndarray:
    """Cosine similarities of matched latents.

    With ``lift == 1`` positions are matched by identical coordinates.
    Otherwise ``ya`` is the lower-resolution side: its coordinates are scaled
    by ``lift`` and each is compared with every ``yb`` latent within
    ``radius``, averaging over those matches.
    """
    if len(ya) == 0 or len(yb) == 0:
        return np.zeros(0)
    fa, fb = _unit(ya.features), _unit(yb.features)
    if lift == 1:
        ka, kb = core.pack(ya.coords), core.pack(yb.coords)
        _, ia, ib = np.intersect1d(ka, kb, assume_unique=True, return_indices=True)
        cos = np.einsum("ij,ij->i", fa[ia], fb[ib])
        # identical non-zero vectors are exactly aligned; skip the rounding of the dot product
        same = np.all(ya.features[ia] == yb.features[ib], axis=1) & np.any(fa[ia] != 0, axis=1)
        return np.where(same, 1.0, np.clip(cos, -1.0, 1.0))
    tree = cKDTree(yb.coords.astype(np.float64))
    groups = tree.query_ball_point(ya.coords.astype(np.float64) * lift, radius)
    out = [float(np.mean(fb[g] @ fa[i])) for i, g in enumerate(groups) if g]
    return np.asarray(out)


def cosine_matrix(latents: dict, sf_s: int, sf_t: int, mode: str = "sequential") -> SimilarityMatrix:
    """5x5 mean cosine similarity between qp models' latents of the same blocks.

    ``latents`` maps ``(qp, sf, block_key) -> SparseTensor``.  Entry (i, j)
    pools all matched positions over the blocks present for both
    ``(i, sf_s)`` and ``(j, sf_t)``.
    """
    low, high = max(sf_s, sf_t), min(sf_s, sf_t)
    lift = low // high
    keys = {(qp, sf): set() for qp in range(1, 6) for sf in (sf_s, sf_t)}
    for qp, sf, key in latents:
        if (qp, sf) in keys:
            keys[qp, sf].add(key)
    mat = np.full((5, 5), np.nan)
    for i in range(1, 6):
        for j in range(1, 6):
            vals = []
            for key in sorted(keys[i, sf_s] & keys[j, sf_t]):
                a, b = latents[i, sf_s, key], latents[j, sf_t, key]
                if sf_s < sf_t:
                    a, b = b, a
                vals.append(block_cosines(a, b, lift))
            vals = np.concatenate(vals) if vals else np.zeros(0)
            if len(vals):
                mat[i - 1, j - 1] = float(np.mean(vals))
            else:
                log.warning("no matched latents for qp pair (%d, %d)", i, j)
    return SimilarityMatrix(mat, (sf_s, sf_t), mode)
