"""Central finite-difference checks of every hand-written backward rule.

Each check builds a tiny random problem in float64, reduces the operator output
to a scalar with a fixed random projection and compares the tape gradients of
all inputs with central differences.  The reported error of an input tensor is
``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` over the checked
entries; an operator's error is the worst over its inputs and seeds.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .autodiff import Tape, Tensor, dot, group_norm, matmul, max_over_rows, relu, softmax_cross_entropy, add
from .lattice import PointCloud
from .network import Hierarchy, loss as model_loss, resnet_block
from .lattice import num_taps

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class GradcheckResult:
    op: str
    max_rel_error: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def numerical_gradient(fn: Callable[[], Tensor], t: Tensor, entries: np.ndarray, h: float = STEP) -> np.ndarray:
    flat = t.data.reshape(-1)
    out = np.empty(len(entries))
    for i, e in enumerate(entries):
        orig = flat[e]
        flat[e] = orig + h
        fp = fn().item()
        flat[e] = orig - h
        fm = fn().item()
        flat[e] = orig
        out[i] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_function(fn: Callable[[], Tensor], inputs: list[Tensor], rng: np.random.Generator, max_entries: int = 48, h: float = STEP) -> float:
    """Worst relative error of ``fn``'s tape gradients over ``inputs``."""
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    worst = 0.0
    for t in inputs:
        n = t.data.size
        entries = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
        analytic = np.zeros(n) if t.grad is None else t.grad.reshape(-1)[entries]
        if t.grad is None:
            analytic = np.zeros(len(entries))
        numeric = numerical_gradient(fn, t, entries, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def random_cloud(rng: np.random.Generator, d: int = 3, m: int = 24, features: int = 2, extent: float = 2.5) -> PointCloud:
    pos = rng.uniform(0.0, extent, size=(m, d))
    feats = rng.normal(size=(m, features)) if features else None
    return PointCloud(pos, features=feats, sigma=1.0)


def _projected(out: Tensor, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    R = Tensor(rng.normal(size=out.shape))
    return R, dot(out, R)


# --------------------------------------------------------------------------- per-op problems
# each returns (scalar function, list of differentiated inputs)


def _splat(rng):
    d = int(rng.integers(1, 4))
    cloud = random_cloud(rng, d=d)
    h = Hierarchy(cloud, 1)
    F = Tensor(rng.normal(size=(cloud.num_points, 3)))
    R = Tensor(rng.normal(size=(len(h.lattices[0]), 3)))
    return lambda: dot(ops.splat(F, h.assignment), R), [F]


def _slice(rng):
    d = int(rng.integers(1, 4))
    cloud = random_cloud(rng, d=d)
    h = Hierarchy(cloud, 1)
    X = Tensor(rng.normal(size=(len(h.lattices[0]), 3)))
    R = Tensor(rng.normal(size=(cloud.num_points, 3)))
    return lambda: dot(ops.slice_values(X, h.assignment), R), [X]


def _gather(rng):
    cloud = random_cloud(rng, d=2)
    h = Hierarchy(cloud, 1)
    X = Tensor(rng.normal(size=(len(h.lattices[0]), 3)))
    R = Tensor(rng.normal(size=(cloud.num_points, 9)))
    return lambda: dot(ops.gather(X, h.assignment), R), [X]


def _distribute_pointnet(rng):
    cloud = random_cloud(rng, d=3, features=2)
    h = Hierarchy(cloud, 1)
    buffers = ops.distribute(cloud, h.assignment)
    F = Tensor(cloud.features.copy())
    widths = [5, 6, 4]
    layers = [
        (Tensor(rng.normal(size=(widths[i], widths[i + 1]))), Tensor(rng.normal(size=(widths[i + 1],))))
        for i in range(len(widths) - 1)
    ]
    R = Tensor(rng.normal(size=(len(h.lattices[0]), widths[-1])))

    def fn():
        rows = ops.distributed_rows(buffers, F)
        return dot(ops.vertex_pointnet(rows, buffers.offsets, layers), R)

    return fn, [F] + [t for pair in layers for t in pair]


def _convolve(rng):
    d = int(rng.integers(2, 4))
    cloud = random_cloud(rng, d=d, m=30)
    lat = Hierarchy(cloud, 1).lattices[0]
    X = Tensor(rng.normal(size=(len(lat), 3)))
    W = Tensor(rng.normal(size=(num_taps(d), 3, 2)))
    b = Tensor(rng.normal(size=(2,)))
    R = Tensor(rng.normal(size=(len(lat), 2)))
    return lambda: dot(ops.convolve(X, lat, W, b), R), [X, W, b]


def _coarsen(rng):
    d = int(rng.integers(2, 4))
    cloud = random_cloud(rng, d=d, m=30, extent=4.0)
    pair = Hierarchy(cloud, 2).pairs[0]
    X = Tensor(rng.normal(size=(len(pair.fine), 3)))
    W = Tensor(rng.normal(size=(num_taps(d), 3, 2)))
    b = Tensor(rng.normal(size=(2,)))
    R = Tensor(rng.normal(size=(len(pair.coarse), 2)))
    return lambda: dot(ops.coarsen_conv(X, pair, W, b), R), [X, W, b]


def _upsample(rng):
    d = int(rng.integers(2, 4))
    cloud = random_cloud(rng, d=d, m=30, extent=4.0)
    pair = Hierarchy(cloud, 2).pairs[0]
    X = Tensor(rng.normal(size=(len(pair.coarse), 3)))
    W = Tensor(rng.normal(size=(num_taps(d), 3, 2)))
    b = Tensor(rng.normal(size=(2,)))
    R = Tensor(rng.normal(size=(len(pair.fine), 2)))
    return lambda: dot(ops.upsample_conv(X, pair, W, b), R), [X, W, b]


def _deform_offsets(rng):
    d = int(rng.integers(1, 4))
    C = 3
    q = Tensor(rng.normal(size=(10, (d + 1) * C)))
    W = Tensor(rng.normal(size=(C, 1)))
    b = Tensor(rng.normal(size=(1,)))
    R = Tensor(rng.normal(size=(10, d + 1)))
    nl = "tanh" if rng.random() < 0.5 else "relu"
    include_self = bool(rng.random() < 0.25)
    return lambda: dot(ops.deform_offsets(q, W, b, nonlinearity=nl, include_self=include_self), R), [q, W, b]


def _deform_slice(rng):
    d = int(rng.integers(2, 4))
    cloud = random_cloud(rng, d=d)
    h = Hierarchy(cloud, 1)
    X = Tensor(rng.normal(size=(len(h.lattices[0]), 3)))
    W = Tensor(rng.normal(size=(3, 1)))
    b = Tensor(rng.normal(size=(1,)))
    R = Tensor(rng.normal(size=(cloud.num_points, 3)))
    return lambda: dot(ops.deform_slice(X, h.assignment, W, b)[0], R), [X, W, b]


def _group_norm(rng):
    groups = int(rng.choice([1, 2, 4]))
    x = Tensor(rng.normal(size=(7, 8)) * 2 + 1)
    w = Tensor(rng.normal(size=(8,)))
    b = Tensor(rng.normal(size=(8,)))
    R = Tensor(rng.normal(size=(7, 8)))
    return lambda: dot(group_norm(x, groups, w, b), R), [x, w, b]


def _resnet_block(rng):
    cloud = random_cloud(rng, d=3, m=30)
    lat = Hierarchy(cloud, 1).lattices[0]
    C, K = 4, num_taps(3)
    params = {
        "blk.gn1.weight": Tensor(1 + 0.1 * rng.normal(size=(C,))),
        "blk.gn1.bias": Tensor(0.1 * rng.normal(size=(C,))),
        "blk.conv1.weight": Tensor(0.3 * rng.normal(size=(K, C, C))),
        "blk.conv1.bias": Tensor(0.1 * rng.normal(size=(C,))),
        "blk.gn2.weight": Tensor(1 + 0.1 * rng.normal(size=(C,))),
        "blk.gn2.bias": Tensor(0.1 * rng.normal(size=(C,))),
        "blk.conv2.weight": Tensor(0.3 * rng.normal(size=(K, C, C))),
        "blk.conv2.bias": Tensor(0.1 * rng.normal(size=(C,))),
    }
    x = Tensor(rng.normal(size=(len(lat), C)))
    R = Tensor(rng.normal(size=(len(lat), C)))
    return lambda: dot(resnet_block(x, lat, params, "blk", 2), R), [x, *params.values()]


def _loss(rng):
    m, K = 12, 4
    logits = Tensor(rng.normal(size=(m, K)))
    labels = rng.integers(0, K, size=m)
    labels[rng.random(m) < 0.2] = -1
    labels[0] = 1
    offsets = Tensor(0.2 * rng.normal(size=(m, 3)))
    lam = float(rng.uniform(0.1, 2.0))
    return lambda: model_loss(logits, labels, offsets, lam), [logits, offsets]


def _matmul(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 2)))
    R = Tensor(rng.normal(size=(3, 2)))
    return lambda: dot(matmul(a, b), R), [a, b]


def _relu(rng):
    x = Tensor(rng.normal(size=(5, 4)))
    R = Tensor(rng.normal(size=(5, 4)))
    return lambda: dot(relu(x), R), [x]


def _max_over_rows(rng):
    x = Tensor(rng.normal(size=(6, 3)))
    R = Tensor(rng.normal(size=(1, 3)))
    return lambda: dot(max_over_rows(x)[0], R), [x]


def _softmax_ce(rng):
    logits = Tensor(rng.normal(size=(6, 3)))
    labels = rng.integers(0, 3, size=6)
    return lambda: softmax_cross_entropy(logits, labels), [logits]


def _regularizer(rng):
    D = Tensor(rng.normal(size=(6, 4)))
    return lambda: ops.deform_regularizer(D), [D]


def _composition(rng):
    """Three stacked layers: linear -> relu -> group norm -> linear -> cross-entropy."""
    x = Tensor(rng.normal(size=(8, 5)))
    w1 = Tensor(rng.normal(size=(5, 4)))
    b1 = Tensor(rng.normal(size=(4,)))
    gw = Tensor(rng.normal(size=(4,)))
    gb = Tensor(rng.normal(size=(4,)))
    w2 = Tensor(rng.normal(size=(4, 3)))
    labels = rng.integers(0, 3, size=8)

    def fn():
        h = relu(add(matmul(x, w1), b1))
        h = group_norm(h, 2, gw, gb)
        return softmax_cross_entropy(matmul(h, w2), labels)

    return fn, [x, w1, b1, gw, gb, w2]


OPERATORS: dict[str, Callable] = {
    "splat": _splat,
    "distribute_pointnet": _distribute_pointnet,
    "convolve": _convolve,
    "coarsen_conv": _coarsen,
    "upsample_conv": _upsample,
    "slice": _slice,
    "gather": _gather,
    "deform_offsets": _deform_offsets,
    "deform_slice": _deform_slice,
    "group_norm": _group_norm,
    "resnet_block": _resnet_block,
    "loss": _loss,
}

PRIMITIVES: dict[str, Callable] = {
    "matmul": _matmul,
    "relu": _relu,
    "max_over_rows": _max_over_rows,
    "softmax_cross_entropy": _softmax_ce,
    "deform_regularizer": _regularizer,
    "composition": _composition,
}

ALL_CHECKS = {**OPERATORS, **PRIMITIVES}


def run_check(name: str, seeds: int = 20, base_seed: int = 0) -> GradcheckResult:
    if name not in ALL_CHECKS:
        raise KeyError(f"unknown operator {name!r}; choose from {sorted(ALL_CHECKS)}")
    build = ALL_CHECKS[name]
    start = time.perf_counter()
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng([base_seed, s, len(name)])
        fn, inputs = build(rng)
        worst = max(worst, check_function(fn, inputs, rng))
    return GradcheckResult(name, worst, seeds, time.perf_counter() - start)


def run_all(seeds: int = 20, names=None) -> list[GradcheckResult]:
    return [run_check(n, seeds) for n in (names or ALL_CHECKS)]
