"""Micro-benchmarks of the lattice operators on a synthetic scene."""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import ops
from .autodiff import Tape, Tensor
from .datasets import two_spheres
from .lattice import build_lattice, num_taps
from .network import Hierarchy, LatticeNet, LayerSpec, loss


def _time(fn: Callable[[], object], repeat: int) -> float:
    fn()
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def run(points: int = 4000, sigma: float = 0.1, channels: int = 64, repeat: int = 3, seed: int = 0) -> list[tuple[str, float]]:
    """Best-of-``repeat`` wall time in milliseconds per operation."""
    rng = np.random.default_rng(seed)
    cloud = two_spheres(points, rng).replace(sigma=sigma)
    h = Hierarchy(cloud, 2)
    lat = h.lattices[0]
    X = Tensor(rng.normal(size=(len(lat), channels)).astype(np.float32))
    Xc = Tensor(rng.normal(size=(len(h.lattices[1]), channels)).astype(np.float32))
    W = Tensor(rng.normal(size=(num_taps(3), channels, channels)).astype(np.float32))
    F = Tensor(rng.normal(size=(points, channels)).astype(np.float32))
    model = LatticeNet.create(LayerSpec(), seed=seed)

    def train_step():
        with Tape() as tape:
            res = model.forward(cloud, h3)
            value = loss(res.logits, cloud.labels)
        tape.backward(value)

    h3 = Hierarchy(cloud, 3)
    rows = [
        ("build_lattice", _time(lambda: build_lattice(cloud), repeat)),
        ("hierarchy(3 levels)", _time(lambda: Hierarchy(cloud, 3), repeat)),
        ("splat", _time(lambda: ops.splat(F, h.assignment), repeat)),
        ("slice", _time(lambda: ops.slice_values(X, h.assignment), repeat)),
        ("convolve", _time(lambda: ops.convolve(X, lat, W), repeat)),
        ("coarsen_conv", _time(lambda: ops.coarsen_conv(X, h.pairs[0], W), repeat)),
        ("upsample_conv", _time(lambda: ops.upsample_conv(Xc, h.pairs[0], W), repeat)),
        ("forward", _time(lambda: model.forward(cloud, h3), repeat)),
        ("forward+backward", _time(train_step, repeat)),
    ]
    return rows
