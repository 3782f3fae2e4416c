"""Procedural voxelized surfaces used as the toy training and test corpus."""

from __future__ import annotations

import numpy as np

from .core import PointCloud

SHAPES = ("sphere", "plane", "torus", "wavy", "box")


def _voxelize(pts: np.ndarray, grid: int) -> PointCloud:
    v = np.floor(pts).astype(np.int64)
    v = v[np.all((v >= 0) & (v < grid), axis=1)]
    return PointCloud.from_points(v)


def _dense_samples(rng, n):
    return rng.uniform(0.0, 1.0, size=(n, 2))


def make_shape(kind: str, grid: int = 64, rng=None) -> PointCloud:
    """One surface of the given kind, scaled and jittered to fill most of the grid."""
    rng = np.random.default_rng(rng)
    g = float(grid)
    c = g / 2 + rng.uniform(-0.05, 0.05, 3) * g
    n = int(40 * grid * grid)
    u, v = _dense_samples(rng, n).T
    if kind == "sphere":
        r = g * rng.uniform(0.3, 0.45)
        th, ph = 2 * np.pi * u, np.arccos(2 * v - 1)
        pts = c + r * np.stack([np.sin(ph) * np.cos(th), np.sin(ph) * np.sin(th), np.cos(ph)], 1)
    elif kind == "plane":
        a, b = rng.normal(size=(2, 3))
        pts = c + (u[:, None] - 0.5) * a * g * 0.8 + (v[:, None] - 0.5) * b * g * 0.8
    elif kind == "torus":
        big, small = g * rng.uniform(0.25, 0.32), g * rng.uniform(0.08, 0.14)
        th, ph = 2 * np.pi * u, 2 * np.pi * v
        pts = c + np.stack([(big + small * np.cos(ph)) * np.cos(th),
                            (big + small * np.cos(ph)) * np.sin(th),
                            small * np.sin(ph)], 1)
    elif kind == "wavy":
        amp, freq = g * rng.uniform(0.05, 0.12), rng.uniform(1.0, 3.0)
        x, y = u * g * 0.9 + 0.05 * g, v * g * 0.9 + 0.05 * g
        z = c[2] + amp * np.sin(2 * np.pi * freq * x / g) * np.cos(2 * np.pi * freq * y / g)
        pts = np.stack([x, y, z], 1)
    elif kind == "box":
        half = g * rng.uniform(0.2, 0.35, 3)
        face = rng.integers(0, 6, n)
        axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
        pts = np.empty((n, 3))
        for ax in range(3):
            pts[:, ax] = (rng.uniform(-1, 1, n)) * half[ax]
        pts[np.arange(n), axis] = sign * half[axis]
        pts = pts + c
    else:
        raise ValueError(f"unknown shape {kind!r}")
    pts = pts + rng.normal(scale=0.15, size=pts.shape)
    return _voxelize(pts, grid)


def toy_corpus(n: int, grid: int = 64, seed: int = 0) -> list[PointCloud]:
    rng = np.random.default_rng(seed)
    return [make_shape(SHAPES[i % len(SHAPES)], grid, rng) for i in range(n)]
