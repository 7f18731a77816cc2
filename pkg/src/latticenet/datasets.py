"""Synthetic desk-scale segmentation scenes."""
from __future__ import annotations

import numpy as np

from .lattice import PointCloud

KINDS = ("two-spheres", "plane-plus-pole", "checker-walls")


def _sphere(rng, n, center, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + radius * v


def two_spheres(n: int, rng: np.random.Generator) -> PointCloud:
    """A small sphere (label 0) and a large one (label 1), not touching."""
    r_small = rng.uniform(0.25, 0.35)
    r_large = rng.uniform(0.55, 0.7)
    gap = rng.uniform(0.3, 0.6)
    direction = rng.normal(size=3)
    direction[2] *= 0.3
    direction /= np.linalg.norm(direction)
    c_small = np.zeros(3)
    c_large = direction * (r_small + r_large + gap)
    n0 = n // 2
    pts = np.vstack([_sphere(rng, n0, c_small, r_small), _sphere(rng, n - n0, c_large, r_large)])
    labels = np.r_[np.zeros(n0), np.ones(n - n0)].astype(np.int64)
    pts += rng.normal(scale=0.003, size=pts.shape)
    pts -= pts.mean(axis=0)
    return PointCloud(pts, labels=labels)


def plane_plus_pole(n: int, rng: np.random.Generator) -> PointCloud:
    """A ground square (label 0) with a vertical pole standing on it (label 1)."""
    half = rng.uniform(0.8, 1.2)
    radius = rng.uniform(0.05, 0.1)
    height = rng.uniform(1.0, 1.5)
    foot = rng.uniform(-0.4 * half, 0.4 * half, size=2)
    n0 = n // 2
    ground = np.column_stack([rng.uniform(-half, half, size=(n0, 2)), np.zeros(n0)])
    ang = rng.uniform(0, 2 * np.pi, size=n - n0)
    pole = np.column_stack(
        [foot[0] + radius * np.cos(ang), foot[1] + radius * np.sin(ang), rng.uniform(0.02, height, size=n - n0)]
    )
    pts = np.vstack([ground, pole]) + rng.normal(scale=0.003, size=(n, 3))
    labels = np.r_[np.zeros(n0), np.ones(n - n0)].astype(np.int64)
    return PointCloud(pts, labels=labels)


def checker_walls(n: int, rng: np.random.Generator, tile: float = 0.4) -> PointCloud:
    """Two perpendicular walls tiled in a checker pattern.

    Flat tiles carry label 0; rippled tiles (a sinusoidal relief normal to the
    wall) carry label 1, so the class is a local shape property.
    """
    width = rng.uniform(1.6, 2.4)
    height = rng.uniform(1.2, 1.6)
    amp = 0.03
    wavelength = 0.1
    n_a = n // 2
    pts = []
    labels = []
    for wall, count in ((0, n_a), (1, n - n_a)):
        u = rng.uniform(0, width, size=count)
        v = rng.uniform(0, height, size=count)
        cell = (np.floor(u / tile) + np.floor(v / tile)).astype(np.int64) % 2
        if wall == 1:
            cell = 1 - cell
        relief = cell * amp * np.sin(2 * np.pi * u / wavelength)
        if wall == 0:
            xyz = np.column_stack([u, relief, v])
        else:
            xyz = np.column_stack([relief, u, v])
        pts.append(xyz)
        labels.append(cell)
    pts = np.vstack(pts) + rng.normal(scale=0.002, size=(n, 3))
    pts -= pts.mean(axis=0)
    return PointCloud(pts, labels=np.concatenate(labels))


GENERATORS = {
    "two-spheres": two_spheres,
    "plane-plus-pole": plane_plus_pole,
    "checker-walls": checker_walls,
}


def make_scene(kind: str, n: int, rng: np.random.Generator) -> PointCloud:
    if kind not in GENERATORS:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from {KINDS}")
    if n < 100:
        raise ValueError(f"need at least 100 points per cloud, got {n}")
    return GENERATORS[kind](n, rng)


def make_dataset(kind: str, n: int, seed: int, clouds: int = 5, val_fraction: float = 0.2) -> tuple[list[PointCloud], list[PointCloud]]:
    """Generate ``clouds`` scenes of ``n`` points, split train/val by a seeded shuffle."""
    if clouds < 2:
        raise ValueError("need at least two clouds to form a train/val split")
    rng = np.random.default_rng(seed)
    scenes = [make_scene(kind, n, rng) for _ in range(clouds)]
    order = np.random.default_rng([seed, 1]).permutation(clouds)
    n_val = min(max(1, int(round(val_fraction * clouds))), clouds - 1)
    val = [scenes[i] for i in sorted(order[:n_val])]
    train = [scenes[i] for i in sorted(order[n_val:])]
    return train, val
